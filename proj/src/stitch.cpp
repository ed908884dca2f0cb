#include "ftsep/stitch.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"
#include "ftsep/losses.hpp"

namespace ftsep {

SegmentPlan plan_segments(int64_t length, double seg_s, double overlap_frac, int sample_rate) {
    if (seg_s <= 0) throw ConfigError("plan_segments: segment length must be positive");
    if (overlap_frac < 0 || overlap_frac >= 1) throw ConfigError("plan_segments: overlap must be in [0, 1)");
    if (length < 1) throw std::invalid_argument("plan_segments: empty input");

    SegmentPlan plan;
    plan.input_len = length;
    plan.segment_len = std::llround(seg_s * sample_rate);
    const int64_t overlap = std::llround(plan.segment_len * overlap_frac);
    plan.hop = plan.segment_len - overlap;
    if (plan.hop < 1) throw ConfigError("plan_segments: overlap leaves no hop");

    for (int64_t start = 0;; start += plan.hop) {
        const int64_t nominal_end = start + plan.segment_len;
        Segment seg;
        seg.start = start;
        seg.end = std::min(nominal_end, length);
        seg.pad = nominal_end - seg.end;
        plan.segments.push_back(seg);
        if (nominal_end >= length) break;
    }
    return plan;
}

Waveform cut_segment(const Waveform& x, const SegmentPlan& plan, size_t index) {
    const Segment& seg = plan.segments.at(index);
    Waveform out;
    out.sample_rate = x.sample_rate;
    out.samples.assign(x.samples.begin() + seg.start, x.samples.begin() + seg.end);
    out.samples.resize(plan.segment_len, 0.0);
    return out;
}

std::vector<Waveform> separate_direct(const FtrnnModel& model, const Waveform& mixture) {
    return forward(model, mixture);
}

namespace {

double energy(const Waveform& w) {
    double e = 0;
    for (double v : w.samples) e += v * v;
    return e;
}

}  // namespace

std::vector<std::vector<Waveform>> oracle_align(const std::vector<std::vector<Waveform>>& est_segments,
                                                const std::vector<std::vector<Waveform>>& ref_segments,
                                                std::vector<SegmentDiagnostics>* diagnostics) {
    if (est_segments.size() != ref_segments.size())
        throw std::invalid_argument("oracle_align: " + std::to_string(est_segments.size()) +
                                    " estimate segments vs " + std::to_string(ref_segments.size()) +
                                    " reference segments");
    std::vector<std::vector<Waveform>> aligned(est_segments.size());
    for (size_t s = 0; s < est_segments.size(); ++s) {
        const auto& ests = est_segments[s];
        const auto& refs = ref_segments[s];
        if (ests.size() != refs.size()) throw std::invalid_argument("oracle_align: channel count mismatch");
        const int c = static_cast<int>(ests.size());
        for (int i = 0; i < c; ++i)
            if (ests[i].length() != refs[i].length())
                throw std::invalid_argument("oracle_align: segment length mismatch");

        std::vector<bool> silent(c);
        bool any_silent = false;
        for (int r = 0; r < c; ++r) {
            silent[r] = energy(refs[r]) == 0.0;
            any_silent = any_silent || silent[r];
        }

        // score matrix over live reference channels only
        std::vector<std::vector<double>> score(c, std::vector<double>(c, 0.0));
        for (int e = 0; e < c; ++e)
            for (int r = 0; r < c; ++r)
                if (!silent[r]) score[e][r] = si_sdr(refs[r], ests[e]);

        double best_primary = 0, best_secondary = 0;
        std::vector<int> best_perm;
        for (const auto& perm : all_permutations(c)) {
            double primary = 0, secondary = 0;
            for (int e = 0; e < c; ++e) {
                if (silent[perm[e]])
                    secondary -= energy(ests[e]);  // quietest estimate onto the silent channel
                else
                    primary += score[e][perm[e]];
            }
            if (best_perm.empty() || primary > best_primary ||
                (primary == best_primary && secondary > best_secondary)) {
                best_primary = primary;
                best_secondary = secondary;
                best_perm = perm;
            }
        }

        aligned[s].resize(c);
        for (int e = 0; e < c; ++e) aligned[s][best_perm[e]] = ests[e];

        if (diagnostics) {
            SegmentDiagnostics d;
            d.segment_index = static_cast<int>(s);
            d.permutation = best_perm;
            d.silent_fallback = any_silent;
            d.per_channel_si_sdr_db.resize(c);
            for (int e = 0; e < c; ++e)
                if (!silent[best_perm[e]]) d.per_channel_si_sdr_db[best_perm[e]] = score[e][best_perm[e]];
            diagnostics->push_back(std::move(d));
        }
    }
    return aligned;
}

std::vector<Waveform> overlap_add_stitch(const std::vector<std::vector<Waveform>>& aligned_segments,
                                         const SegmentPlan& plan) {
    if (aligned_segments.size() != plan.segments.size())
        throw std::invalid_argument("overlap_add_stitch: segment count does not match the plan");
    if (aligned_segments.empty()) return {};
    const size_t channels = aligned_segments[0].size();
    std::vector<Waveform> out(channels);
    for (size_t ch = 0; ch < channels; ++ch) {
        std::vector<double> acc(plan.input_len, 0.0);
        std::vector<int> cnt(plan.input_len, 0);
        for (size_t s = 0; s < plan.segments.size(); ++s) {
            const auto& seg_wave = aligned_segments[s].at(ch);
            if (seg_wave.length() != plan.segment_len)
                throw std::invalid_argument("overlap_add_stitch: segment length does not match the plan");
            const int64_t start = plan.segments[s].start;
            for (int64_t i = 0; i < plan.segment_len; ++i) {
                const int64_t pos = start + i;
                if (pos >= plan.input_len) break;
                acc[pos] += seg_wave.samples[i];
                cnt[pos] += 1;
            }
        }
        out[ch].sample_rate = aligned_segments[0][ch].sample_rate;
        out[ch].samples.resize(plan.input_len);
        for (int64_t i = 0; i < plan.input_len; ++i)
            out[ch].samples[i] = cnt[i] > 0 ? acc[i] / cnt[i] : 0.0;
    }
    return out;
}

StitchResult stitch_separate(const FtrnnModel& model, const Waveform& mixture,
                             const std::vector<Waveform>& references, double seg_s, double overlap_frac) {
    for (const auto& r : references)
        if (r.length() != mixture.length())
            throw std::invalid_argument("stitch_separate: reference length does not match the mixture");

    StitchResult result;
    result.plan = plan_segments(mixture.length(), seg_s, overlap_frac, mixture.sample_rate);

    std::vector<std::vector<Waveform>> est_segments, ref_segments;
    for (size_t s = 0; s < result.plan.segments.size(); ++s) {
        Waveform piece = cut_segment(mixture, result.plan, s);
        est_segments.push_back(forward(model, piece));
        std::vector<Waveform> refs;
        for (const auto& r : references) refs.push_back(cut_segment(r, result.plan, s));
        ref_segments.push_back(std::move(refs));
    }

    auto aligned = oracle_align(est_segments, ref_segments, &result.diagnostics);
    for (size_t s = 0; s < result.diagnostics.size(); ++s) {
        result.diagnostics[s].start_s =
            static_cast<double>(result.plan.segments[s].start) / mixture.sample_rate;
        result.diagnostics[s].end_s = static_cast<double>(result.plan.segments[s].end) / mixture.sample_rate;
    }
    result.outputs = overlap_add_stitch(aligned, result.plan);
    return result;
}

void save_diagnostics(const std::string& path, const std::vector<SegmentDiagnostics>& diagnostics) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    for (const auto& d : diagnostics) {
        nlohmann::ordered_json j;
        j["segment"] = d.segment_index;
        j["start_s"] = d.start_s;
        j["end_s"] = d.end_s;
        j["permutation"] = d.permutation;
        nlohmann::ordered_json scores = nlohmann::ordered_json::array();
        for (const auto& v : d.per_channel_si_sdr_db) {
            if (v)
                scores.push_back(*v);
            else
                scores.push_back(nullptr);
        }
        j["per_channel_si_sdr_db"] = scores;
        j["silent_fallback"] = d.silent_fallback;
        os << j.dump() << "\n";
    }
}

}  // namespace ftsep
