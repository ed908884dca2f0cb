#ifndef FTSEP_METRICS_HPP
#define FTSEP_METRICS_HPP

#include <utility>
#include <vector>

#include "ftsep/audio.hpp"
#include "ftsep/mixture.hpp"

namespace ftsep {

struct Interval {
    double start_s = 0.0;
    double end_s = 0.0;
};

/// Per-speaker activity timelines; intervals sorted and disjoint per speaker.
struct Annotation {
    std::vector<std::vector<Interval>> speakers;

    void validate() const;
    double total_speech_s() const;
};

Annotation annotation_from_timeline(const std::vector<TimelineEntry>& timeline, int num_speakers);

struct DerResult {
    double missed_s = 0.0;
    double false_alarm_s = 0.0;
    double confusion_s = 0.0;
    double total_speech_s = 0.0;
    std::vector<int> mapping;  // hypothesis speaker -> reference speaker, -1 if unmapped

    double der() const { return (missed_s + false_alarm_s + confusion_s) / total_speech_s; }
};

/// Recording-level permutation maximizing mean per-channel SI-SDR.
/// Returns (mean dB, permutation estimate -> reference).
std::pair<double, std::vector<int>> eval_si_sdr(const std::vector<Waveform>& references,
                                                const std::vector<Waveform>& estimates);

/// Frame-RMS voice activity with a peak-relative threshold; frames on
/// frame_s windows with 50% overlap, adjacent active frames merged, gaps
/// shorter than 0.2 s bridged.
std::vector<Interval> energy_vad(const Waveform& wave, double frame_s = 0.025, double threshold_db = -40.0);

/// Diarization error under the best speaker mapping; the timeline is cut
/// into homogeneous slices and each slice is classified into missed /
/// false-alarm / confusion time. A collar around reference boundaries is
/// excluded from scoring; overlap regions are scored.
DerResult der(const Annotation& reference, const Annotation& hypothesis, double collar_s = 0.0);

}  // namespace ftsep

#endif  // FTSEP_METRICS_HPP
