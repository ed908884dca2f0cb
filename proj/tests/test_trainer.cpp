#include "ftsep/trainer.hpp"

#include <cmath>
#include <filesystem>

#include "doctest.h"

using namespace ftsep;

namespace {

// two-sine toy mixtures, enough for smoke-level training runs
TrainData toy_data(int count, double dur_s, int rate, uint64_t seed) {
    TrainData data;
    GenConfig cfg;
    cfg.reverb_enabled = false;
    cfg.sample_rate = rate;
    cfg.utt_min = 1;
    cfg.utt_max = 1;
    cfg.utt_dur_s = {std::max(0.3, dur_s - 0.4), std::max(0.4, dur_s - 0.3)};
    cfg.gap_s = {0.05, 0.15};
    cfg.snr_db = {25.0, 30.0};
    for (int i = 0; i < count; ++i) {
        Rng rng(Rng::derive_seed(seed, i));
        MixtureSpec spec = sample_spec(cfg, rng);
        GeneratedMixture gen = generate_mixture(cfg, spec);
        data.mixtures.push_back(gen.mixture);
        data.references.push_back(gen.references);
    }
    return data;
}

}  // namespace

TEST_CASE("global norm clipping") {
    std::vector<Tensor> g1 = {Tensor::from_vector({3, 4}, {2}, Dtype::kF64)};
    double n1 = clip_global_norm(g1, 5.0);
    CHECK(n1 == doctest::Approx(5.0));
    CHECK(g1[0].at(0) == 3.0);  // boundary: untouched
    CHECK(g1[0].at(1) == 4.0);

    std::vector<Tensor> g2 = {Tensor::from_vector({6, 8}, {2}, Dtype::kF64)};
    double n2 = clip_global_norm(g2, 5.0);
    CHECK(n2 == doctest::Approx(10.0));
    CHECK(g2[0].at(0) == doctest::Approx(3.0));
    CHECK(g2[0].at(1) == doctest::Approx(4.0));

    // multi-tensor clipping equals clipping the concatenated vector
    Rng rng(1);
    std::vector<double> a(5), b(7);
    for (auto& x : a) x = rng.uniform(-2, 2);
    for (auto& x : b) x = rng.uniform(-2, 2);
    std::vector<Tensor> multi = {Tensor::from_vector(a, {5}, Dtype::kF64),
                                 Tensor::from_vector(b, {7}, Dtype::kF64)};
    std::vector<double> concat = a;
    concat.insert(concat.end(), b.begin(), b.end());
    std::vector<Tensor> single = {Tensor::from_vector(concat, {12}, Dtype::kF64)};
    double nm = clip_global_norm(multi, 1.0);
    double ns = clip_global_norm(single, 1.0);
    CHECK(nm == doctest::Approx(ns));
    for (int i = 0; i < 5; ++i) CHECK(multi[0].at(i) == doctest::Approx(single[0].at(i)));
    for (int i = 0; i < 7; ++i) CHECK(multi[1].at(i) == doctest::Approx(single[0].at(5 + i)));

    std::vector<Tensor> bad = {Tensor::from_vector({std::nan("")}, {1}, Dtype::kF64)};
    CHECK_THROWS_AS(clip_global_norm(bad, 5.0), std::runtime_error);
}

TEST_CASE("adam first step magnitude and zero-gradient behavior") {
    std::vector<Tensor> params = {Tensor::from_vector({1.0}, {1}, Dtype::kF64)};
    AdamState state = AdamState::init(params);
    const double lr = 1e-3, g = 0.3;
    adam_step(params, {Tensor::from_vector({g}, {1}, Dtype::kF64)}, state, lr);
    const double expected_delta = lr * g / (std::abs(g) + state.eps);
    CHECK(1.0 - params[0].at(0) == doctest::Approx(expected_delta).epsilon(1e-12));
    CHECK(state.step == 1);

    // zero gradient: parameters unchanged, step still increments
    std::vector<Tensor> frozen = {Tensor::from_vector({0.5}, {1}, Dtype::kF64)};
    AdamState s2 = AdamState::init(frozen);
    adam_step(frozen, {Tensor::zeros({1}, Dtype::kF64)}, s2, lr);
    CHECK(frozen[0].at(0) == 0.5);
    CHECK(s2.step == 1);
}

TEST_CASE("early stop counter semantics") {
    // patience 2 with strictly worsening validation stops after 3 epochs
    EarlyStop s(2);
    CHECK(!s.update(1.0));
    CHECK(!s.update(2.0));
    CHECK(s.update(3.0));
    CHECK(s.epochs_seen() == 3);
    CHECK(s.best_epoch() == 1);
    CHECK(s.best() == 1.0);

    // improvement resets the counter
    EarlyStop t(2);
    CHECK(!t.update(3.0));
    CHECK(!t.update(2.5));
    CHECK(!t.update(4.0));
    CHECK(!t.update(2.0));
    CHECK(!t.update(5.0));
    CHECK(t.update(5.0));
    CHECK(t.best() == 2.0);
}

TEST_CASE("training runs, improves, and round-trips checkpoints") {
    FtrnnConfig mcfg;
    mcfg.n_fft = 64;
    mcfg.hop = 32;
    mcfg.sample_rate = 4000;
    mcfg.feature_dim = 6;
    mcfg.num_blocks = 1;
    mcfg.hidden_full = 8;
    mcfg.hidden_sub = 8;
    FtrnnModel model = init_model(mcfg, 3);

    TrainData data = toy_data(4, 1.5, mcfg.sample_rate, 11);
    TrainConfig tcfg;
    tcfg.lr = 2e-3;
    tcfg.batch_size = 2;
    tcfg.max_epochs = 4;
    tcfg.segment_s = 1.5;
    tcfg.seed = 5;
    tcfg.checkpoint_dir = "test_trainer_ckpt";

    auto [trained, history] = train(model, data, data, tcfg);
    REQUIRE(!history.epochs.empty());
    CHECK(history.epochs.back().skipped_steps == 0);
    CHECK(history.epochs.front().val_loss > history.best_val_loss - 1e-12);
    CHECK(trained.all_finite());

    // loss should move in the right direction on this trivial task
    CHECK(history.best_val_loss < history.epochs.front().val_loss + 1.0);

    // checkpoint round trip: identical validation loss
    FtrnnModel loaded = load_checkpoint("test_trainer_ckpt/best.ftrn");
    auto pa = trained.named_params();
    auto pb = loaded.named_params();
    REQUIRE(pa.size() == pb.size());
    for (size_t i = 0; i < pa.size(); ++i)
        for (int64_t j = 0; j < pa[i].second->numel(); ++j)
            CHECK(pa[i].second->at(j) == pb[i].second->at(j));

    CHECK(std::filesystem::exists("test_trainer_ckpt/history.jsonl"));
    std::filesystem::remove_all("test_trainer_ckpt");
}

TEST_CASE("training is deterministic per seed") {
    FtrnnConfig mcfg;
    mcfg.n_fft = 64;
    mcfg.hop = 32;
    mcfg.sample_rate = 4000;
    mcfg.feature_dim = 4;
    mcfg.num_blocks = 1;
    mcfg.hidden_full = 4;
    mcfg.hidden_sub = 4;

    TrainData data = toy_data(2, 1.0, mcfg.sample_rate, 21);
    TrainConfig tcfg;
    tcfg.batch_size = 2;
    tcfg.max_epochs = 2;
    tcfg.segment_s = 1.0;
    tcfg.seed = 9;

    auto [m1, h1] = train(init_model(mcfg, 7), data, data, tcfg);
    auto [m2, h2] = train(init_model(mcfg, 7), data, data, tcfg);
    auto p1 = m1.named_params();
    auto p2 = m2.named_params();
    for (size_t i = 0; i < p1.size(); ++i)
        for (int64_t j = 0; j < p1[i].second->numel(); ++j)
            CHECK(p1[i].second->at(j) == p2[i].second->at(j));
    REQUIRE(h1.epochs.size() == h2.epochs.size());
    for (size_t e = 0; e < h1.epochs.size(); ++e) CHECK(h1.epochs[e].train_loss == h2.epochs[e].train_loss);
}

TEST_CASE("persistently skipped steps abort training") {
    FtrnnConfig mcfg;
    mcfg.n_fft = 64;
    mcfg.hop = 32;
    mcfg.sample_rate = 4000;
    mcfg.feature_dim = 4;
    mcfg.num_blocks = 1;
    mcfg.hidden_full = 4;
    mcfg.hidden_sub = 4;

    // a reference channel of digital silence makes every step unusable
    TrainData broken = toy_data(2, 1.0, mcfg.sample_rate, 41);
    for (auto& refs : broken.references) refs[1].samples.assign(refs[1].samples.size(), 0.0);
    TrainData ok_val = toy_data(1, 1.0, mcfg.sample_rate, 42);

    TrainConfig tcfg;
    tcfg.batch_size = 2;
    tcfg.max_epochs = 1;
    tcfg.segment_s = 1.0;
    CHECK_THROWS_AS(train(init_model(mcfg, 1), broken, ok_val, tcfg), std::runtime_error);
}

TEST_CASE("pit target order does not change the segment loss") {
    TrainData data = toy_data(1, 1.0, 8000, 31);
    std::vector<Tensor> refs, swapped;
    for (const auto& r : data.references[0])
        refs.push_back(Tensor::from_vector(r.samples, {r.length()}, Dtype::kF64));
    swapped = {refs[1], refs[0]};
    Rng rng(4);
    std::vector<Tensor> ests;
    for (const auto& r : data.references[0]) {
        std::vector<double> v = r.samples;
        for (auto& x : v) x = 0.7 * x + 0.1 * rng.normal();
        ests.push_back(Tensor::from_vector(v, {r.length()}, Dtype::kF64));
    }
    const double a = pit_loss(refs, ests).loss.item();
    const double b = pit_loss(swapped, ests).loss.item();
    CHECK(a == doctest::Approx(b).epsilon(1e-12));
}
