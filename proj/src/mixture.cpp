#include "ftsep/mixture.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>

#include "ftsep/fft.hpp"

namespace ftsep {

namespace {
constexpr double kSpeedOfSound = 343.0;
constexpr double kPi = fft::kPi;
}  // namespace

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void GenConfig::validate() const {
    auto range_ok = [](const Range& r) { return r.lo <= r.hi; };
    if (num_speakers < 2) throw ConfigError("gen: num_speakers must be >= 2");
    if (utt_min < 1 || utt_max < utt_min) throw ConfigError("gen: bad utterance count range");
    for (const Range* r : {&utt_dur_s, &gap_s, &level_db, &snr_db, &rt60_s, &room_lw_m, &room_h_m, &mic_h_m,
                           &src_h_m})
        if (!range_ok(*r)) throw ConfigError("gen: range with lo > hi");
    if (utt_dur_s.lo < 0.3 || utt_dur_s.hi > 10.0)
        throw ConfigError("gen: utterance durations must lie in [0.3, 10] s");
    if (gap_s.lo < 0) throw ConfigError("gen: negative gaps");
    if (rt60_s.lo <= 0) throw ConfigError("gen: RT60 must be positive");
    if (min_separation_m <= 0) throw ConfigError("gen: min_separation must be positive");
    if (sample_rate < 1000) throw ConfigError("gen: sample_rate too low");
    if (source_kind == SourceKind::kFileCorpus && speech_dir.empty())
        throw ConfigError("gen: file-corpus source needs speech_dir");
}

namespace {

nlohmann::ordered_json range_json(const Range& r) { return nlohmann::ordered_json::array({r.lo, r.hi}); }

Range range_from(const nlohmann::json& j) {
    if (!j.is_array() || j.size() != 2) throw ConfigError("gen: range must be [lo, hi]");
    return Range{j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

nlohmann::ordered_json GenConfig::to_json() const {
    nlohmann::ordered_json j;
    j["num_speakers"] = num_speakers;
    j["utt_min"] = utt_min;
    j["utt_max"] = utt_max;
    j["utt_dur_s"] = range_json(utt_dur_s);
    j["gap_s"] = range_json(gap_s);
    j["level_db"] = range_json(level_db);
    j["snr_db"] = range_json(snr_db);
    j["rt60_s"] = range_json(rt60_s);
    j["room_lw_m"] = range_json(room_lw_m);
    j["room_h_m"] = range_json(room_h_m);
    j["mic_h_m"] = range_json(mic_h_m);
    j["src_h_m"] = range_json(src_h_m);
    j["min_separation_m"] = min_separation_m;
    j["sample_rate"] = sample_rate;
    j["reverb_enabled"] = reverb_enabled;
    j["source_kind"] = source_kind == SourceKind::kSynthetic ? "synthetic" : "file-corpus";
    j["speech_dir"] = speech_dir;
    j["noise_dir"] = noise_dir;
    return j;
}

GenConfig GenConfig::from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {
        "num_speakers", "utt_min",   "utt_max",   "utt_dur_s",        "gap_s",       "level_db",
        "snr_db",       "rt60_s",    "room_lw_m", "room_h_m",         "mic_h_m",     "src_h_m",
        "min_separation_m", "sample_rate", "reverb_enabled", "source_kind", "speech_dir", "noise_dir"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ConfigError("gen: unknown config key '" + it.key() + "'");
    GenConfig cfg;
    cfg.num_speakers = j.value("num_speakers", cfg.num_speakers);
    cfg.utt_min = j.value("utt_min", cfg.utt_min);
    cfg.utt_max = j.value("utt_max", cfg.utt_max);
    if (j.count("utt_dur_s")) cfg.utt_dur_s = range_from(j.at("utt_dur_s"));
    if (j.count("gap_s")) cfg.gap_s = range_from(j.at("gap_s"));
    if (j.count("level_db")) cfg.level_db = range_from(j.at("level_db"));
    if (j.count("snr_db")) cfg.snr_db = range_from(j.at("snr_db"));
    if (j.count("rt60_s")) cfg.rt60_s = range_from(j.at("rt60_s"));
    if (j.count("room_lw_m")) cfg.room_lw_m = range_from(j.at("room_lw_m"));
    if (j.count("room_h_m")) cfg.room_h_m = range_from(j.at("room_h_m"));
    if (j.count("mic_h_m")) cfg.mic_h_m = range_from(j.at("mic_h_m"));
    if (j.count("src_h_m")) cfg.src_h_m = range_from(j.at("src_h_m"));
    cfg.min_separation_m = j.value("min_separation_m", cfg.min_separation_m);
    cfg.sample_rate = j.value("sample_rate", cfg.sample_rate);
    cfg.reverb_enabled = j.value("reverb_enabled", cfg.reverb_enabled);
    if (j.count("source_kind")) {
        const std::string k = j.at("source_kind").get<std::string>();
        if (k == "synthetic")
            cfg.source_kind = SourceKind::kSynthetic;
        else if (k == "file-corpus")
            cfg.source_kind = SourceKind::kFileCorpus;
        else
            throw ConfigError("gen: unknown source_kind '" + k + "'");
    }
    cfg.speech_dir = j.value("speech_dir", cfg.speech_dir);
    cfg.noise_dir = j.value("noise_dir", cfg.noise_dir);
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Spec sampling
// ---------------------------------------------------------------------------

MixtureSpec sample_spec(const GenConfig& cfg, Rng& rng) {
    cfg.validate();
    MixtureSpec spec;
    spec.seed = rng.next_u64();
    Rng local(spec.seed);

    for (int s = 0; s < cfg.num_speakers; ++s) {
        const int count = static_cast<int>(local.uniform_int(cfg.utt_min, cfg.utt_max));
        std::vector<UttSpec> utts(count);
        std::vector<double> gaps(count);
        for (int u = 0; u < count; ++u) {
            utts[u].duration_s = cfg.utt_dur_s.sample(local);
            utts[u].level_db = cfg.level_db.sample(local);
            utts[u].source_id = cfg.source_kind == SourceKind::kFileCorpus
                                    ? static_cast<int>(local.uniform_int(0, 1 << 20))
                                    : -1;
            gaps[u] = cfg.gap_s.sample(local);
        }
        spec.utterances.push_back(std::move(utts));
        spec.gaps_s.push_back(std::move(gaps));
        SpeakerTraits tr = sample_traits(local);
        tr.seed = Rng::derive_seed(spec.seed, 0x5000 + s);
        spec.traits.push_back(tr);
    }

    spec.snr_db = cfg.snr_db.sample(local);
    spec.rt60_s = cfg.rt60_s.sample(local);
    spec.room_m = {cfg.room_lw_m.sample(local), cfg.room_lw_m.sample(local), cfg.room_h_m.sample(local)};

    const double sep = cfg.min_separation_m;
    auto sample_xy = [&](double lim) { return local.uniform(sep, lim - sep); };
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
        if (spec.room_m[0] <= 2 * sep || spec.room_m[1] <= 2 * sep) break;
        spec.mic_m = {sample_xy(spec.room_m[0]), sample_xy(spec.room_m[1]), cfg.mic_h_m.sample(local)};
        spec.src_m.clear();
        for (int s = 0; s < cfg.num_speakers; ++s)
            spec.src_m.push_back(
                {sample_xy(spec.room_m[0]), sample_xy(spec.room_m[1]), cfg.src_h_m.sample(local)});
        auto dist = [](const std::array<double, 3>& a, const std::array<double, 3>& b) {
            return std::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) +
                             (a[2] - b[2]) * (a[2] - b[2]));
        };
        placed = true;
        for (int s = 0; s < cfg.num_speakers && placed; ++s) {
            if (dist(spec.mic_m, spec.src_m[s]) < sep) placed = false;
            for (int o = 0; o < s; ++o)
                if (dist(spec.src_m[s], spec.src_m[o]) < sep) placed = false;
        }
    }
    if (!placed)
        throw ConfigError("gen: geometry unsatisfiable after 1000 retries; config: " + cfg.to_json().dump());
    return spec;
}

// ---------------------------------------------------------------------------
// Speaker signal assembly
// ---------------------------------------------------------------------------

std::pair<Waveform, std::vector<std::pair<double, double>>> build_speaker_signal(
    const std::vector<Waveform>& utterances, const std::vector<double>& gaps_s,
    const std::vector<double>& levels_db, int sample_rate) {
    if (utterances.empty()) throw std::invalid_argument("build_speaker_signal: no utterances");
    if (gaps_s.size() != utterances.size() || levels_db.size() != utterances.size())
        throw std::invalid_argument("build_speaker_signal: need one gap and one level per utterance");

    Waveform out;
    out.sample_rate = sample_rate;
    std::vector<std::pair<double, double>> timeline;
    for (size_t u = 0; u < utterances.size(); ++u) {
        const int64_t gap = std::llround(gaps_s[u] * sample_rate);
        if (gap < 0) throw std::invalid_argument("build_speaker_signal: negative gap");
        out.samples.insert(out.samples.end(), gap, 0.0);
        const double gain = std::pow(10.0, levels_db[u] / 20.0);
        const int64_t start = out.length();
        for (double v : utterances[u].samples) out.samples.push_back(gain * v);
        timeline.emplace_back(static_cast<double>(start) / sample_rate,
                              static_cast<double>(out.length()) / sample_rate);
    }
    return {std::move(out), std::move(timeline)};
}

// ---------------------------------------------------------------------------
// Image-source reverberation
// ---------------------------------------------------------------------------

namespace {

struct AxisImage {
    double offset;  // image coordinate minus mic coordinate
    int reflections;
};

std::vector<AxisImage> axis_images(double length, double src, double mic, double reach) {
    std::vector<AxisImage> out;
    const int n_max = static_cast<int>(reach / (2.0 * length)) + 2;
    for (int n = -n_max; n <= n_max; ++n) {
        // images at 2nL + s (|2n| reflections) and 2nL - s (|2n-1| reflections)
        out.push_back({2.0 * n * length + src - mic, std::abs(2 * n)});
        out.push_back({2.0 * n * length - src - mic, std::abs(2 * n - 1)});
    }
    return out;
}

}  // namespace

RirResult render_rir(const std::array<double, 3>& room_m, const std::array<double, 3>& src_m,
                     const std::array<double, 3>& mic_m, double rt60_s, int sample_rate, int max_order) {
    if (rt60_s <= 0) throw std::invalid_argument("render_rir: rt60 must be positive");
    for (int a = 0; a < 3; ++a) {
        if (room_m[a] <= 0) throw std::invalid_argument("render_rir: degenerate room");
        if (src_m[a] <= 0 || src_m[a] >= room_m[a] || mic_m[a] <= 0 || mic_m[a] >= room_m[a])
            throw std::invalid_argument("render_rir: source/mic must be strictly inside the room");
    }

    const double volume = room_m[0] * room_m[1] * room_m[2];
    const double surface =
        2.0 * (room_m[0] * room_m[1] + room_m[0] * room_m[2] + room_m[1] * room_m[2]);
    // Absorption inverted from the statistical decay law, with a calibration
    // factor for the specular image model: its Schroeder tail decays slower
    // than the diffuse-field law because low-reflection axial paths dominate
    // late energy. 1.5 centers measured T60 on the target across the
    // sampled room and RT60 ranges.
    constexpr double kDecayCalibration = 1.5;
    const double sabine_exponent = 0.161 * volume / (surface * rt60_s);
    double alpha = 1.0 - std::exp(-kDecayCalibration * sabine_exponent);
    bool clamped = false;
    if (alpha >= 0.9999) {
        alpha = 0.9999;
        clamped = true;
    }
    if (alpha <= 1e-6) {
        alpha = 1e-6;
        clamped = true;
    }
    const double beta = std::sqrt(1.0 - alpha);

    auto dist3 = [](double x, double y, double z) { return std::sqrt(x * x + y * y + z * z); };
    const double direct = dist3(src_m[0] - mic_m[0], src_m[1] - mic_m[1], src_m[2] - mic_m[2]);

    const double tail_s = 1.15 * rt60_s + direct / kSpeedOfSound;
    const int64_t len = static_cast<int64_t>(std::ceil(tail_s * sample_rate)) + 128;
    const double reach = tail_s * kSpeedOfSound;

    Waveform rir;
    rir.sample_rate = sample_rate;
    rir.samples.assign(len, 0.0);

    const auto xs = axis_images(room_m[0], src_m[0], mic_m[0], reach);
    const auto ys = axis_images(room_m[1], src_m[1], mic_m[1], reach);
    const auto zs = axis_images(room_m[2], src_m[2], mic_m[2], reach);

    constexpr int kHalfTaps = 40;
    const double norm = 4.0 * kPi * std::max(direct, 1e-3);
    for (const auto& ix : xs) {
        for (const auto& iy : ys) {
            const double d2xy = ix.offset * ix.offset + iy.offset * iy.offset;
            if (d2xy > reach * reach) continue;
            for (const auto& iz : zs) {
                const int order = ix.reflections + iy.reflections + iz.reflections;
                if (max_order >= 0 && order > max_order) continue;
                const double d = std::sqrt(d2xy + iz.offset * iz.offset);
                if (d > reach) continue;
                const double amp =
                    norm * std::pow(beta, order) / (4.0 * kPi * std::max(d, 1e-3));
                const double center = d / kSpeedOfSound * sample_rate;
                const int64_t i0 = static_cast<int64_t>(std::floor(center));
                const double frac = center - i0;
                const double sp = std::sin(kPi * frac);
                for (int j = -kHalfTaps; j <= kHalfTaps; ++j) {
                    const int64_t idx = i0 + j;
                    if (idx < 0 || idx >= len) continue;
                    const double x = j - frac;
                    double sinc;
                    if (std::abs(x) < 1e-9) {
                        sinc = 1.0;
                    } else {
                        const double sign = (j % 2 == 0) ? 1.0 : -1.0;
                        sinc = -sign * sp / (kPi * x);
                    }
                    const double taper = 0.5 * (1.0 + std::cos(kPi * x / (kHalfTaps + 1)));
                    rir.samples[idx] += amp * sinc * taper;
                }
            }
        }
    }
    return {std::move(rir), clamped};
}

Waveform fft_convolve(const Waveform& x, const Waveform& kernel, int64_t out_len) {
    const int64_t full = x.length() + kernel.length() - 1;
    size_t n = 1;
    while (static_cast<int64_t>(n) < full) n <<= 1;
    std::vector<std::complex<double>> fx(n), fk(n);
    for (int64_t i = 0; i < x.length(); ++i) fx[i] = x.samples[i];
    for (int64_t i = 0; i < kernel.length(); ++i) fk[i] = kernel.samples[i];
    fft::forward(fx);
    fft::forward(fk);
    for (size_t i = 0; i < n; ++i) fx[i] *= fk[i];
    fft::inverse(fx);
    Waveform out;
    out.sample_rate = x.sample_rate;
    out.samples.resize(out_len);
    for (int64_t i = 0; i < out_len; ++i) out.samples[i] = i < full ? fx[i].real() : 0.0;
    return out;
}

// ---------------------------------------------------------------------------
// SNR mixing
// ---------------------------------------------------------------------------

MixResult scale_and_mix(const std::vector<Waveform>& speakers, const Waveform& noise, double snr_db) {
    if (speakers.empty()) throw std::invalid_argument("scale_and_mix: no speakers");
    const int64_t len = speakers[0].length();
    for (const auto& s : speakers)
        if (s.length() != len) throw std::invalid_argument("scale_and_mix: speaker length mismatch");

    // signal level: arithmetic mean of per-speaker powers on the dB scale
    double level_db_sum = 0.0;
    for (const auto& s : speakers) {
        double p = 0;
        for (double v : s.samples) p += v * v;
        p /= static_cast<double>(len);
        if (p <= 0) throw std::invalid_argument("scale_and_mix: silent speaker channel");
        level_db_sum += pow_to_db(p);
    }
    const double signal_db = level_db_sum / static_cast<double>(speakers.size());

    Waveform noise_scaled;
    noise_scaled.sample_rate = speakers[0].sample_rate;
    noise_scaled.samples.assign(len, 0.0);
    if (!std::isinf(snr_db)) {
        if (noise.length() < 1) throw std::invalid_argument("scale_and_mix: empty noise");
        double pn = 0;
        for (int64_t i = 0; i < len; ++i) {
            const double v = noise.samples[i % noise.length()];
            pn += v * v;
        }
        pn /= static_cast<double>(len);
        if (pn <= 0) throw std::invalid_argument("scale_and_mix: silent noise");
        const double gain = std::sqrt(db_to_pow(signal_db - snr_db) / pn);
        for (int64_t i = 0; i < len; ++i)
            noise_scaled.samples[i] = gain * noise.samples[i % noise.length()];
    }

    MixResult res;
    res.references = speakers;
    res.noise_scaled = std::move(noise_scaled);
    res.mixture.sample_rate = speakers[0].sample_rate;
    res.mixture.samples.resize(len);
    // summation order (speakers in channel order, then noise) is part of the
    // bit-exact additivity contract
    for (int64_t i = 0; i < len; ++i) {
        double acc = 0.0;
        for (const auto& s : res.references) acc += s.samples[i];
        res.mixture.samples[i] = acc + res.noise_scaled.samples[i];
    }
    return res;
}

// ---------------------------------------------------------------------------
// Synthetic sources
// ---------------------------------------------------------------------------

SpeakerTraits sample_traits(Rng& rng) {
    SpeakerTraits t;
    t.f0_hz = rng.uniform(90.0, 300.0);
    t.tilt = rng.uniform(0.8, 1.5);
    t.vibrato_hz = rng.uniform(4.0, 6.5);
    t.vibrato_depth = rng.uniform(0.01, 0.03);
    return t;
}

Waveform synth_utterance(Rng& rng, double duration_s, int sample_rate, const SpeakerTraits& traits) {
    if (duration_s < 0.3 || duration_s > 10.0)
        throw std::invalid_argument("synth_utterance: duration outside [0.3, 10] s");
    const int64_t n = static_cast<int64_t>(std::llround(duration_s * sample_rate));
    Waveform w;
    w.sample_rate = sample_rate;
    w.samples.assign(n, 0.0);

    const double nyq = 0.45 * sample_rate;
    const int partials = std::max(1, static_cast<int>(nyq / traits.f0_hz));
    std::vector<double> phase(partials), amp(partials);
    for (int k = 0; k < partials; ++k) {
        phase[k] = rng.uniform(0.0, 2.0 * kPi);
        amp[k] = std::pow(k + 1.0, -traits.tilt);
    }
    const double vib_phase = rng.uniform(0.0, 2.0 * kPi);
    const double am_hz = rng.uniform(1.5, 3.5);
    const double am_phase = rng.uniform(0.0, 2.0 * kPi);

    const double ramp_s = 0.05;
    const int64_t ramp_n = std::min<int64_t>(n / 2, std::llround(ramp_s * sample_rate));
    double osc = 0.0;  // integrated fundamental phase
    for (int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sample_rate;
        const double f0 = traits.f0_hz *
                          (1.0 + traits.vibrato_depth * std::sin(2.0 * kPi * traits.vibrato_hz * t + vib_phase));
        osc += 2.0 * kPi * f0 / sample_rate;
        double v = 0.0;
        for (int k = 0; k < partials; ++k) {
            const double f_k = (k + 1) * f0;
            if (f_k >= nyq) break;
            v += amp[k] * std::sin((k + 1) * osc + phase[k]);
        }
        double env = 1.0 + 0.25 * std::sin(2.0 * kPi * am_hz * t + am_phase);
        if (i < ramp_n) env *= 0.5 * (1.0 - std::cos(kPi * i / static_cast<double>(ramp_n)));
        if (i >= n - ramp_n) env *= 0.5 * (1.0 - std::cos(kPi * (n - 1 - i) / static_cast<double>(ramp_n)));
        w.samples[i] = env * v;
    }

    double rms = 0;
    for (double v : w.samples) rms += v * v;
    rms = std::sqrt(rms / n);
    if (rms > 0)
        for (double& v : w.samples) v /= rms;
    return w;
}

Waveform synth_noise(Rng& rng, int64_t length, int sample_rate) {
    Waveform w;
    w.sample_rate = sample_rate;
    w.samples.assign(length, 0.0);
    const double am_hz = rng.uniform(0.1, 0.5);
    const double am_phase = rng.uniform(0.0, 2.0 * kPi);
    double state = 0.0;
    const double a = 0.85;  // one-pole lowpass
    for (int64_t i = 0; i < length; ++i) {
        state = a * state + (1.0 - a) * rng.normal();
        const double t = static_cast<double>(i) / sample_rate;
        w.samples[i] = state * (1.0 + 0.3 * std::sin(2.0 * kPi * am_hz * t + am_phase));
    }
    double rms = 0;
    for (double v : w.samples) rms += v * v;
    rms = std::sqrt(rms / std::max<int64_t>(length, 1));
    if (rms > 0)
        for (double& v : w.samples) v /= rms;
    return w;
}

// ---------------------------------------------------------------------------
// Full mixture assembly
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> list_wavs(const std::string& dir) {
    std::vector<std::string> out;
    for (const auto& entry : std::filesystem::directory_iterator(dir))
        if (entry.is_regular_file() && entry.path().extension() == ".wav") out.push_back(entry.path().string());
    std::sort(out.begin(), out.end());
    if (out.empty()) throw DataError("no .wav files in " + dir);
    return out;
}

Waveform corpus_utterance(const std::vector<std::string>& files, int source_id, double duration_s, int rate) {
    const Waveform full = read_wav(files[source_id % files.size()]);
    if (full.sample_rate != rate)
        throw DataError(files[source_id % files.size()] + ": sample rate " +
                        std::to_string(full.sample_rate) + " does not match configured " + std::to_string(rate));
    Waveform w = full;
    const int64_t want = std::llround(duration_s * rate);
    if (w.length() > want) w.samples.resize(want);
    double rms = 0;
    for (double v : w.samples) rms += v * v;
    rms = std::sqrt(rms / std::max<int64_t>(w.length(), 1));
    if (rms > 0)
        for (double& v : w.samples) v /= rms;
    return w;
}

}  // namespace

GeneratedMixture generate_mixture(const GenConfig& cfg, const MixtureSpec& spec) {
    cfg.validate();
    GeneratedMixture out;
    const int rate = cfg.sample_rate;

    std::vector<std::string> speech_files;
    if (cfg.source_kind == SourceKind::kFileCorpus) speech_files = list_wavs(cfg.speech_dir);

    std::vector<Waveform> dry;
    for (size_t s = 0; s < spec.utterances.size(); ++s) {
        std::vector<Waveform> utts;
        std::vector<double> gaps, levels;
        for (size_t u = 0; u < spec.utterances[s].size(); ++u) {
            const UttSpec& us = spec.utterances[s][u];
            if (cfg.source_kind == SourceKind::kFileCorpus) {
                utts.push_back(corpus_utterance(speech_files, us.source_id, us.duration_s, rate));
            } else {
                Rng urng(Rng::derive_seed(spec.traits[s].seed, 0x700 + u));
                utts.push_back(synth_utterance(urng, us.duration_s, rate, spec.traits[s]));
            }
            gaps.push_back(spec.gaps_s[s][u]);
            levels.push_back(us.level_db);
        }
        auto [wave, bounds] = build_speaker_signal(utts, gaps, levels, rate);
        for (auto& [b0, b1] : bounds) out.timeline.push_back({static_cast<int>(s), b0, b1});
        dry.push_back(std::move(wave));
    }

    int64_t len = 0;
    for (const auto& d : dry) len = std::max(len, d.length());
    for (auto& d : dry) d.samples.resize(len, 0.0);

    std::vector<Waveform> refs;
    if (cfg.reverb_enabled) {
        for (size_t s = 0; s < dry.size(); ++s) {
            RirResult rr = render_rir(spec.room_m, spec.src_m[s], spec.mic_m, spec.rt60_s, rate);
            if (rr.absorption_clamped)
                out.warnings.push_back("speaker " + std::to_string(s) + ": absorption clamp hit");
            refs.push_back(fft_convolve(dry[s], rr.rir, len));
        }
    } else {
        refs = dry;
    }

    Rng noise_rng(Rng::derive_seed(spec.seed, 0x401));
    Waveform noise;
    if (!cfg.noise_dir.empty()) {
        const auto files = list_wavs(cfg.noise_dir);
        noise = read_wav(files[noise_rng.uniform_int(0, static_cast<int64_t>(files.size()) - 1)]);
        if (noise.sample_rate != rate) throw DataError("noise corpus sample rate mismatch");
    } else {
        noise = synth_noise(noise_rng, len, rate);
    }

    MixResult mixed = scale_and_mix(refs, noise, spec.snr_db);
    out.mixture = std::move(mixed.mixture);
    out.references = std::move(mixed.references);
    out.noise_scaled = std::move(mixed.noise_scaled);
    return out;
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

nlohmann::ordered_json ManifestRecord::to_json() const {
    nlohmann::ordered_json j;
    j["id"] = id;
    j["mixture"] = mixture_path;
    j["references"] = reference_paths;
    nlohmann::ordered_json tl = nlohmann::ordered_json::array();
    for (const auto& e : timeline) {
        nlohmann::ordered_json t;
        t["speaker"] = e.speaker;
        t["start_s"] = e.start_s;
        t["end_s"] = e.end_s;
        tl.push_back(t);
    }
    j["timeline"] = tl;
    j["snr_db"] = snr_db;
    j["rt60_s"] = rt60_s;
    j["room_m"] = room_m;
    j["length_s"] = length_s;
    j["utts_per_speaker"] = utts_per_speaker;
    j["mean_gap_s"] = mean_gap_s;
    j["warnings"] = warnings;
    return j;
}

ManifestRecord ManifestRecord::from_json(const nlohmann::json& j) {
    ManifestRecord r;
    r.id = j.at("id").get<std::string>();
    r.mixture_path = j.at("mixture").get<std::string>();
    r.reference_paths = j.at("references").get<std::vector<std::string>>();
    for (const auto& t : j.at("timeline"))
        r.timeline.push_back(
            {t.at("speaker").get<int>(), t.at("start_s").get<double>(), t.at("end_s").get<double>()});
    r.snr_db = j.at("snr_db").get<double>();
    r.rt60_s = j.at("rt60_s").get<double>();
    auto room = j.at("room_m").get<std::vector<double>>();
    if (room.size() != 3) throw DataError("manifest: room_m must have 3 entries");
    r.room_m = {room[0], room[1], room[2]};
    r.length_s = j.at("length_s").get<double>();
    r.utts_per_speaker = j.at("utts_per_speaker").get<std::vector<int>>();
    r.mean_gap_s = j.at("mean_gap_s").get<double>();
    r.warnings = j.value("warnings", std::vector<std::string>{});
    return r;
}

void Manifest::save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    for (const auto& r : records) os << r.to_json().dump() << "\n";
    if (!os) throw IoError("short write to " + path);
}

Manifest Manifest::load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    Manifest m;
    std::string line;
    size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            m.records.push_back(ManifestRecord::from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(line_no) + ": malformed manifest record: " + e.what());
        }
    }
    return m;
}

Manifest generate_dataset(const GenConfig& cfg, int count, uint64_t seed, const std::string& out_dir) {
    cfg.validate();
    if (count < 1) throw ConfigError("gen: count must be >= 1");
    std::filesystem::create_directories(out_dir);
    Manifest manifest;
    for (int i = 0; i < count; ++i) {
        Rng rng(Rng::derive_seed(seed, i));
        MixtureSpec spec = sample_spec(cfg, rng);
        GeneratedMixture gen = generate_mixture(cfg, spec);

        char id[32];
        std::snprintf(id, sizeof(id), "mix_%05d", i);
        ManifestRecord rec;
        rec.id = id;
        rec.mixture_path = std::string(id) + ".wav";
        write_wav(out_dir + "/" + rec.mixture_path, gen.mixture);
        for (size_t c = 0; c < gen.references.size(); ++c) {
            const std::string ref = std::string(id) + "_spk" + std::to_string(c) + ".wav";
            write_wav(out_dir + "/" + ref, gen.references[c]);
            rec.reference_paths.push_back(ref);
        }
        rec.timeline = gen.timeline;
        rec.snr_db = spec.snr_db;
        rec.rt60_s = spec.rt60_s;
        rec.room_m = spec.room_m;
        rec.length_s = gen.mixture.duration_s();
        for (const auto& utts : spec.utterances) rec.utts_per_speaker.push_back(static_cast<int>(utts.size()));
        double gap_sum = 0;
        int gap_n = 0;
        for (const auto& gaps : spec.gaps_s)
            for (double g : gaps) {
                gap_sum += g;
                ++gap_n;
            }
        rec.mean_gap_s = gap_n ? gap_sum / gap_n : 0.0;
        rec.warnings = gen.warnings;
        manifest.records.push_back(std::move(rec));
    }
    manifest.save(out_dir + "/manifest.jsonl");
    return manifest;
}

}  // namespace ftsep
