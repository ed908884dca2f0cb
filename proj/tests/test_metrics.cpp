#include "ftsep/metrics.hpp"

#include <cmath>

#include "doctest.h"

using namespace ftsep;

namespace {

Waveform random_wave(Rng& rng, int64_t len, int rate = 16000) {
    Waveform w;
    w.sample_rate = rate;
    w.samples.resize(len);
    for (auto& s : w.samples) s = rng.uniform(-1.0, 1.0);
    return w;
}

// 10 ms grid scorer used as the independent DER oracle.
DerResult grid_der(const Annotation& ref, const Annotation& hyp, const std::vector<int>& mapping,
                   double horizon_s) {
    const double step = 0.01;
    DerResult res;
    res.mapping = mapping;
    auto active = [](const std::vector<Interval>& ivs, double t) {
        for (const auto& iv : ivs)
            if (t >= iv.start_s && t < iv.end_s) return true;
        return false;
    };
    for (double t = step / 2; t < horizon_s; t += step) {
        int n_ref = 0, n_hyp = 0, n_correct = 0;
        for (const auto& spk : ref.speakers) n_ref += active(spk, t) ? 1 : 0;
        for (size_t h = 0; h < hyp.speakers.size(); ++h) {
            const bool on = active(hyp.speakers[h], t);
            n_hyp += on ? 1 : 0;
            if (on && mapping[h] >= 0 && active(ref.speakers[mapping[h]], t)) ++n_correct;
        }
        res.total_speech_s += step * n_ref;
        res.missed_s += step * std::max(0, n_ref - n_hyp);
        res.false_alarm_s += step * std::max(0, n_hyp - n_ref);
        res.confusion_s += step * (std::min(n_ref, n_hyp) - n_correct);
    }
    return res;
}

Annotation random_annotation(Rng& rng, int speakers, double horizon_s) {
    Annotation ann;
    ann.speakers.resize(speakers);
    for (auto& spk : ann.speakers) {
        double t = 0;
        while (t < horizon_s - 0.5) {
            // boundaries snapped to the 10 ms grid so the grid oracle is exact
            const double gap = std::round(rng.uniform(0.1, 1.5) * 100) / 100;
            const double dur = std::round(rng.uniform(0.3, 2.0) * 100) / 100;
            const double start = t + gap;
            const double end = std::min(start + dur, horizon_s);
            if (end <= start) break;
            spk.push_back({start, end});
            t = end;
        }
    }
    return ann;
}

}  // namespace

TEST_CASE("eval_si_sdr identity and brute force") {
    Rng rng(1);
    std::vector<Waveform> refs = {random_wave(rng, 8000), random_wave(rng, 8000)};
    auto [cap, perm] = eval_si_sdr(refs, refs);
    CHECK(cap >= 80.0);
    CHECK(perm == std::vector<int>{0, 1});

    std::vector<Waveform> swapped = {refs[1], refs[0]};
    auto [v2, p2] = eval_si_sdr(refs, swapped);
    CHECK(p2 == std::vector<int>{1, 0});
    CHECK(v2 >= 80.0);
}

TEST_CASE("energy vad basics") {
    Waveform silence;
    silence.sample_rate = 16000;
    silence.samples.assign(16000, 0.0);
    CHECK(energy_vad(silence).empty());

    // 1 s tone between 2 s and 3 s inside 5 s of near-silence
    Waveform w;
    w.sample_rate = 16000;
    w.samples.assign(5 * 16000, 0.0);
    for (int64_t i = 2 * 16000; i < 3 * 16000; ++i)
        w.samples[i] = 0.5 * std::sin(2 * M_PI * 440.0 * i / 16000.0);
    auto ivs = energy_vad(w);
    REQUIRE(ivs.size() == 1);
    CHECK(ivs[0].start_s == doctest::Approx(2.0).epsilon(0.03));
    CHECK(ivs[0].end_s == doctest::Approx(3.0).epsilon(0.03));

    // threshold at -200 dB marks everything with a noise floor active
    Rng rng(2);
    Waveform noisy = w;
    for (auto& v : noisy.samples) v += 1e-5 * rng.normal();
    auto all = energy_vad(noisy, 0.025, -200.0);
    REQUIRE(all.size() == 1);
    CHECK(all[0].start_s == doctest::Approx(0.0));
    CHECK(all[0].end_s == doctest::Approx(5.0).epsilon(0.01));

    // peak-relative threshold makes the detector gain-invariant
    Waveform doubled = noisy;
    for (auto& v : doubled.samples) v *= 2.0;
    auto a = energy_vad(noisy);
    auto b = energy_vad(doubled);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].start_s == b[i].start_s);
        CHECK(a[i].end_s == b[i].end_s);
    }
}

TEST_CASE("der exact cases") {
    Annotation ref;
    ref.speakers = {{{0.0, 10.0}}, {{12.0, 15.0}}};

    // hypothesis == reference
    DerResult same = der(ref, ref);
    CHECK(same.der() == 0.0);
    CHECK(same.total_speech_s == doctest::Approx(13.0));

    // globally swapped channels map back to zero error
    Annotation swapped;
    swapped.speakers = {ref.speakers[1], ref.speakers[0]};
    DerResult sw = der(ref, swapped);
    CHECK(sw.der() == 0.0);
    CHECK(sw.mapping == std::vector<int>{1, 0});

    // hand-constructed confusion: A [0,10]; hyp A [0,8], B [8,10]
    Annotation ref1, hyp1;
    ref1.speakers = {{{0.0, 10.0}}, {}};
    hyp1.speakers = {{{0.0, 8.0}}, {{8.0, 10.0}}};
    DerResult c = der(ref1, hyp1);
    CHECK(c.confusion_s == doctest::Approx(2.0));
    CHECK(c.missed_s == doctest::Approx(0.0));
    CHECK(c.false_alarm_s == doctest::Approx(0.0));
    CHECK(c.der() == doctest::Approx(0.2));
}

TEST_CASE("der rejects empty reference") {
    Annotation ref, hyp;
    ref.speakers = {{}, {}};
    hyp.speakers = {{{0.0, 1.0}}, {}};
    CHECK_THROWS_AS(der(ref, hyp), std::invalid_argument);
}

TEST_CASE("der components match the 10 ms grid scorer") {
    Rng rng(3);
    const double horizon = 12.0;
    for (int rep = 0; rep < 100; ++rep) {
        Annotation ref = random_annotation(rng, 2, horizon);
        if (ref.total_speech_s() <= 0) continue;
        Annotation hyp = random_annotation(rng, 2, horizon);
        DerResult got = der(ref, hyp);
        DerResult want = grid_der(ref, hyp, got.mapping, horizon + 1.0);
        const double tol = 0.0101;  // one grid step
        CHECK(std::abs(got.missed_s - want.missed_s) <= tol);
        CHECK(std::abs(got.false_alarm_s - want.false_alarm_s) <= tol);
        CHECK(std::abs(got.confusion_s - want.confusion_s) <= tol);
        CHECK(std::abs(got.total_speech_s - want.total_speech_s) <= tol);
    }
}

TEST_CASE("der is invariant under hypothesis relabeling") {
    Rng rng(4);
    Annotation ref = random_annotation(rng, 3, 10.0);
    Annotation hyp = random_annotation(rng, 3, 10.0);
    if (ref.total_speech_s() <= 0) return;
    DerResult base = der(ref, hyp);
    Annotation relabeled;
    relabeled.speakers = {hyp.speakers[2], hyp.speakers[0], hyp.speakers[1]};
    DerResult rel = der(ref, relabeled);
    CHECK(rel.der() == doctest::Approx(base.der()).epsilon(1e-12));
}

TEST_CASE("collar excludes reference boundaries from scoring") {
    Annotation ref, hyp;
    ref.speakers = {{{1.0, 5.0}}};
    hyp.speakers = {{{1.1, 5.0}}};  // 100 ms late onset
    DerResult strict = der(ref, hyp, 0.0);
    CHECK(strict.missed_s == doctest::Approx(0.1));
    DerResult forgiving = der(ref, hyp, 0.5);  // 250 ms each side of boundaries
    CHECK(forgiving.missed_s == doctest::Approx(0.0));
}

TEST_CASE("annotation from timeline validates and sorts") {
    std::vector<TimelineEntry> tl = {{0, 3.0, 4.0}, {0, 1.0, 2.0}, {1, 0.5, 1.5}};
    Annotation ann = annotation_from_timeline(tl, 2);
    CHECK(ann.speakers[0][0].start_s == 1.0);
    CHECK(ann.speakers[0][1].start_s == 3.0);
    CHECK(ann.total_speech_s() == doctest::Approx(3.0));

    std::vector<TimelineEntry> overlapping = {{0, 0.0, 2.0}, {0, 1.0, 3.0}};
    CHECK_THROWS_AS(annotation_from_timeline(overlapping, 1), std::invalid_argument);
}
