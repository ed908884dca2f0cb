#include "ftsep/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "ftsep/losses.hpp"

namespace ftsep {

void Annotation::validate() const {
    for (const auto& spk : speakers) {
        double prev_end = -1e18;
        for (const auto& iv : spk) {
            if (iv.end_s < iv.start_s) throw std::invalid_argument("annotation: interval ends before it starts");
            if (iv.start_s < prev_end) throw std::invalid_argument("annotation: intervals overlap or unsorted");
            prev_end = iv.end_s;
        }
    }
}

double Annotation::total_speech_s() const {
    double t = 0;
    for (const auto& spk : speakers)
        for (const auto& iv : spk) t += iv.end_s - iv.start_s;
    return t;
}

Annotation annotation_from_timeline(const std::vector<TimelineEntry>& timeline, int num_speakers) {
    Annotation ann;
    ann.speakers.resize(num_speakers);
    for (const auto& e : timeline) {
        if (e.speaker < 0 || e.speaker >= num_speakers)
            throw std::invalid_argument("timeline: speaker index out of range");
        ann.speakers[e.speaker].push_back({e.start_s, e.end_s});
    }
    for (auto& spk : ann.speakers)
        std::sort(spk.begin(), spk.end(), [](const Interval& a, const Interval& b) { return a.start_s < b.start_s; });
    ann.validate();
    return ann;
}

std::pair<double, std::vector<int>> eval_si_sdr(const std::vector<Waveform>& references,
                                                const std::vector<Waveform>& estimates) {
    if (references.size() != estimates.size() || references.size() < 2)
        throw std::invalid_argument("eval_si_sdr: need matching channel counts (>= 2)");
    const int c = static_cast<int>(references.size());
    std::vector<std::vector<double>> score(c, std::vector<double>(c));
    for (int e = 0; e < c; ++e)
        for (int r = 0; r < c; ++r) score[e][r] = si_sdr(references[r], estimates[e]);
    double best = 0;
    std::vector<int> best_perm;
    for (const auto& perm : all_permutations(c)) {
        double m = 0;
        for (int e = 0; e < c; ++e) m += score[e][perm[e]];
        m /= c;
        if (best_perm.empty() || m > best) {
            best = m;
            best_perm = perm;
        }
    }
    return {best, best_perm};
}

std::vector<Interval> energy_vad(const Waveform& wave, double frame_s, double threshold_db) {
    if (frame_s <= 0) throw std::invalid_argument("energy_vad: frame_s must be positive");
    const int64_t frame = std::max<int64_t>(1, std::llround(frame_s * wave.sample_rate));
    const int64_t hop = std::max<int64_t>(1, frame / 2);

    std::vector<double> rms;
    for (int64_t start = 0; start < wave.length(); start += hop) {
        const int64_t end = std::min(start + frame, wave.length());
        double e = 0;
        for (int64_t i = start; i < end; ++i) e += wave.samples[i] * wave.samples[i];
        rms.push_back(std::sqrt(e / static_cast<double>(end - start)));
    }
    const double peak = *std::max_element(rms.begin(), rms.end());
    if (peak <= 0) return {};
    const double gate = peak * std::pow(10.0, threshold_db / 20.0);

    std::vector<Interval> raw;
    for (size_t k = 0; k < rms.size(); ++k) {
        if (rms[k] < gate) continue;
        const double t0 = static_cast<double>(k * hop) / wave.sample_rate;
        const double t1 = std::min(static_cast<double>(k * hop + frame) / wave.sample_rate, wave.duration_s());
        if (!raw.empty() && t0 <= raw.back().end_s)
            raw.back().end_s = std::max(raw.back().end_s, t1);
        else
            raw.push_back({t0, t1});
    }
    // bridge sub-0.2 s gaps
    std::vector<Interval> merged;
    for (const auto& iv : raw) {
        if (!merged.empty() && iv.start_s - merged.back().end_s < 0.2)
            merged.back().end_s = std::max(merged.back().end_s, iv.end_s);
        else
            merged.push_back(iv);
    }
    return merged;
}

namespace {

bool active_at(const std::vector<Interval>& intervals, double t) {
    for (const auto& iv : intervals)
        if (t >= iv.start_s && t < iv.end_s) return true;
    return false;
}

double overlap_time(const std::vector<Interval>& a, const std::vector<Interval>& b) {
    double total = 0;
    for (const auto& x : a)
        for (const auto& y : b)
            total += std::max(0.0, std::min(x.end_s, y.end_s) - std::max(x.start_s, y.start_s));
    return total;
}

// injective hypothesis -> reference assignments maximizing total co-active
// time; exhaustive over the larger side (fine for the speaker counts here)
std::vector<int> best_mapping(const Annotation& ref, const Annotation& hyp) {
    const int nr = static_cast<int>(ref.speakers.size());
    const int nh = static_cast<int>(hyp.speakers.size());
    if (nr > 8 || nh > 8) throw std::invalid_argument("der: more than 8 speakers is unsupported");
    std::vector<std::vector<double>> ov(nh, std::vector<double>(nr));
    for (int h = 0; h < nh; ++h)
        for (int r = 0; r < nr; ++r) ov[h][r] = overlap_time(hyp.speakers[h], ref.speakers[r]);

    const int n = std::max(nr, nh);
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    std::vector<int> best(nh, -1);
    double best_score = -1;
    do {
        double score = 0;
        for (int h = 0; h < nh; ++h) {
            const int r = idx[h];
            if (r < nr) score += ov[h][r];
        }
        if (score > best_score) {
            best_score = score;
            for (int h = 0; h < nh; ++h) best[h] = idx[h] < nr ? idx[h] : -1;
        }
    } while (std::next_permutation(idx.begin(), idx.end()));
    return best;
}

}  // namespace

DerResult der(const Annotation& reference, const Annotation& hypothesis, double collar_s) {
    reference.validate();
    hypothesis.validate();
    if (collar_s < 0) throw std::invalid_argument("der: negative collar");
    if (reference.total_speech_s() <= 0)
        throw std::invalid_argument("der: reference contains no speech, DER undefined");

    DerResult res;
    res.mapping = best_mapping(reference, hypothesis);

    // elementary slices between all boundary points; collar zones around
    // reference boundaries are their own slices and get skipped
    std::set<double> points;
    std::vector<Interval> excluded;
    for (const auto& spk : reference.speakers)
        for (const auto& iv : spk) {
            for (double b : {iv.start_s, iv.end_s}) {
                points.insert(b);
                if (collar_s > 0) {
                    excluded.push_back({b - collar_s / 2, b + collar_s / 2});
                    points.insert(b - collar_s / 2);
                    points.insert(b + collar_s / 2);
                }
            }
        }
    for (const auto& spk : hypothesis.speakers)
        for (const auto& iv : spk) {
            points.insert(iv.start_s);
            points.insert(iv.end_s);
        }

    std::vector<double> cuts(points.begin(), points.end());
    for (size_t i = 0; i + 1 < cuts.size(); ++i) {
        const double t0 = cuts[i], t1 = cuts[i + 1];
        const double dur = t1 - t0;
        if (dur <= 0) continue;
        const double mid = 0.5 * (t0 + t1);
        if (active_at(excluded, mid)) continue;

        int n_ref = 0, n_hyp = 0, n_correct = 0;
        for (const auto& spk : reference.speakers) n_ref += active_at(spk, mid) ? 1 : 0;
        for (size_t h = 0; h < hypothesis.speakers.size(); ++h) {
            const bool on = active_at(hypothesis.speakers[h], mid);
            n_hyp += on ? 1 : 0;
            const int r = res.mapping[h];
            if (on && r >= 0 && active_at(reference.speakers[r], mid)) ++n_correct;
        }
        res.total_speech_s += dur * n_ref;
        res.missed_s += dur * std::max(0, n_ref - n_hyp);
        res.false_alarm_s += dur * std::max(0, n_hyp - n_ref);
        res.confusion_s += dur * (std::min(n_ref, n_hyp) - n_correct);
    }
    if (res.total_speech_s <= 0)
        throw std::invalid_argument("der: collar excluded all reference speech, DER undefined");
    return res;
}

}  // namespace ftsep
