#ifndef FTSEP_MIXTURE_HPP
#define FTSEP_MIXTURE_HPP

#include <array>
#include <string>
#include <vector>

#include "json.hpp"
#include "ftsep/audio.hpp"

namespace ftsep {

struct Range {
    double lo = 0.0;
    double hi = 0.0;

    double sample(Rng& rng) const { return rng.uniform(lo, hi); }
    bool contains(double v) const { return v >= lo && v <= hi; }
};

enum class SourceKind { kSynthetic, kFileCorpus };

struct GenConfig {
    int num_speakers = 2;
    int utt_min = 4;
    int utt_max = 5;
    Range utt_dur_s{1.0, 3.0};  // synthetic utterance lengths
    Range gap_s{1.0, 3.0};
    Range level_db{0.0, 5.0};
    Range snr_db{0.0, 10.0};
    Range rt60_s{0.2, 0.6};
    Range room_lw_m{4.0, 8.0};
    Range room_h_m{3.0, 4.0};
    Range mic_h_m{1.0, 1.5};
    Range src_h_m{1.5, 2.0};
    double min_separation_m = 0.5;
    int sample_rate = 16000;
    bool reverb_enabled = true;
    SourceKind source_kind = SourceKind::kSynthetic;
    std::string speech_dir;  // file-corpus adapters; unused for synthetic
    std::string noise_dir;

    void validate() const;
    nlohmann::ordered_json to_json() const;
    static GenConfig from_json(const nlohmann::json& j);
};

struct SpeakerTraits {
    double f0_hz = 120.0;
    double tilt = 1.0;         // partial amplitude roll-off exponent
    double vibrato_hz = 5.0;
    double vibrato_depth = 0.02;
    uint64_t seed = 0;
};

struct UttSpec {
    double duration_s = 1.0;
    double level_db = 0.0;
    int source_id = -1;  // file-corpus index; -1 for synthetic
};

/// Everything sampled for one mixture; replaying a spec reproduces the files.
struct MixtureSpec {
    uint64_t seed = 0;
    std::vector<std::vector<UttSpec>> utterances;  // per speaker
    std::vector<std::vector<double>> gaps_s;       // per speaker: leading gap, then between
    std::vector<SpeakerTraits> traits;             // per speaker (synthetic)
    double snr_db = 5.0;
    double rt60_s = 0.4;
    std::array<double, 3> room_m{6, 6, 3.5};
    std::array<double, 3> mic_m{3, 3, 1.2};
    std::vector<std::array<double, 3>> src_m;  // per speaker
};

struct TimelineEntry {
    int speaker = 0;
    double start_s = 0.0;
    double end_s = 0.0;
};

struct ManifestRecord {
    std::string id;
    std::string mixture_path;
    std::vector<std::string> reference_paths;
    std::vector<TimelineEntry> timeline;
    double snr_db = 0.0;
    double rt60_s = 0.0;
    std::array<double, 3> room_m{0, 0, 0};
    double length_s = 0.0;
    std::vector<int> utts_per_speaker;
    double mean_gap_s = 0.0;
    std::vector<std::string> warnings;

    nlohmann::ordered_json to_json() const;
    static ManifestRecord from_json(const nlohmann::json& j);
};

/// Newline-delimited records, stable key order.
struct Manifest {
    std::vector<ManifestRecord> records;

    void save(const std::string& path) const;
    static Manifest load(const std::string& path);
};

/// Uniform draws for every range; geometry rejection-sampled until the wall
/// and pairwise separation constraints hold (at most 1000 retries).
MixtureSpec sample_spec(const GenConfig& cfg, Rng& rng);

/// Silence/utterance alternation with per-utterance gains. gaps[0] leads the
/// first utterance. Utterances are expected unit-RMS (0 dB leaves samples
/// untouched). Returns the signal and sample-accurate utterance boundaries.
std::pair<Waveform, std::vector<std::pair<double, double>>> build_speaker_signal(
    const std::vector<Waveform>& utterances, const std::vector<double>& gaps_s,
    const std::vector<double>& levels_db, int sample_rate);

struct RirResult {
    Waveform rir;
    bool absorption_clamped = false;
};

/// Shoebox image-source impulse response. Uniform wall absorption inverted
/// from the target RT60, fractional delays via windowed sinc, direct path
/// normalized to unit peak. max_order < 0 picks enough orders to cover the
/// decay range.
RirResult render_rir(const std::array<double, 3>& room_m, const std::array<double, 3>& src_m,
                     const std::array<double, 3>& mic_m, double rt60_s, int sample_rate,
                     int max_order = -1);

Waveform fft_convolve(const Waveform& x, const Waveform& kernel, int64_t out_len);

struct MixResult {
    Waveform mixture;
    std::vector<Waveform> references;  // reverberant, pre-noise
    Waveform noise_scaled;
};

/// Signal level = mean of per-speaker powers in dB; noise gain set so that
/// level difference equals snr_db. snr_db = +inf mutes the noise.
MixResult scale_and_mix(const std::vector<Waveform>& speakers, const Waveform& noise, double snr_db);

/// Harmonic complex with vibrato and onset/offset ramps, unit RMS.
Waveform synth_utterance(Rng& rng, double duration_s, int sample_rate, const SpeakerTraits& traits);
SpeakerTraits sample_traits(Rng& rng);

/// Lowpassed noise with slow amplitude modulation, unit RMS.
Waveform synth_noise(Rng& rng, int64_t length, int sample_rate);

struct GeneratedMixture {
    Waveform mixture;
    std::vector<Waveform> references;
    Waveform noise_scaled;
    std::vector<TimelineEntry> timeline;
    std::vector<std::string> warnings;
};

GeneratedMixture generate_mixture(const GenConfig& cfg, const MixtureSpec& spec);

/// Renders `count` mixtures into out_dir (WAV files + manifest.jsonl),
/// deterministic per seed.
Manifest generate_dataset(const GenConfig& cfg, int count, uint64_t seed, const std::string& out_dir);

}  // namespace ftsep

#endif  // FTSEP_MIXTURE_HPP
