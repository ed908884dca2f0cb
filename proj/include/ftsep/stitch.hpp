#ifndef FTSEP_STITCH_HPP
#define FTSEP_STITCH_HPP

#include <optional>
#include <string>
#include <vector>

#include "ftsep/audio.hpp"
#include "ftsep/model.hpp"

namespace ftsep {

struct Segment {
    int64_t start = 0;  // inclusive, samples
    int64_t end = 0;    // exclusive, clipped to the input
    int64_t pad = 0;    // zeros appended to reach the full segment length
};

struct SegmentPlan {
    int64_t segment_len = 0;
    int64_t hop = 0;  // segment_len - overlap
    int64_t input_len = 0;
    std::vector<Segment> segments;
};

/// Starts at 0, hop, 2 hop, ...; only the final segment is zero-padded.
/// Inputs shorter than one segment yield a single padded segment.
SegmentPlan plan_segments(int64_t length, double seg_s, double overlap_frac, int sample_rate);

/// Extracts one planned segment, zero-padded to segment_len.
Waveform cut_segment(const Waveform& x, const SegmentPlan& plan, size_t index);

/// Whole-recording single-pass inference.
std::vector<Waveform> separate_direct(const FtrnnModel& model, const Waveform& mixture);

struct SegmentDiagnostics {
    int segment_index = 0;
    double start_s = 0.0;
    double end_s = 0.0;
    std::vector<int> permutation;  // estimate index -> reference index
    std::vector<std::optional<double>> per_channel_si_sdr_db;  // by reference channel
    bool silent_fallback = false;
};

/// Applies, per segment, the permutation maximizing mean SI-SDR against the
/// reference segments. Segments with an all-silent reference channel fall
/// back to an energy-minimal assignment for that channel and are flagged.
/// Returns estimates reordered to reference channel order.
std::vector<std::vector<Waveform>> oracle_align(const std::vector<std::vector<Waveform>>& est_segments,
                                                const std::vector<std::vector<Waveform>>& ref_segments,
                                                std::vector<SegmentDiagnostics>* diagnostics = nullptr);

/// Sample-wise mean over contributing segments; padding trimmed.
std::vector<Waveform> overlap_add_stitch(const std::vector<std::vector<Waveform>>& aligned_segments,
                                         const SegmentPlan& plan);

struct StitchResult {
    std::vector<Waveform> outputs;
    std::vector<SegmentDiagnostics> diagnostics;
    SegmentPlan plan;
};

/// The segment-separate-stitch pipeline with oracle permutations.
StitchResult stitch_separate(const FtrnnModel& model, const Waveform& mixture,
                             const std::vector<Waveform>& references, double seg_s, double overlap_frac);

/// One JSON record per segment.
void save_diagnostics(const std::string& path, const std::vector<SegmentDiagnostics>& diagnostics);

}  // namespace ftsep

#endif  // FTSEP_STITCH_HPP
