#include "ftsep/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <thread>

namespace ftsep {

void TrainConfig::validate() const {
    if (lr <= 0) throw ConfigError("train: lr must be positive");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (max_epochs < 1) throw ConfigError("train: max_epochs must be >= 1");
    if (clip_norm <= 0) throw ConfigError("train: clip_norm must be positive");
    if (segment_s <= 0) throw ConfigError("train: segment_s must be positive");
    if (early_stop_patience < 1) throw ConfigError("train: early_stop_patience must be >= 1");
    if (max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
}

nlohmann::ordered_json TrainConfig::to_json() const {
    nlohmann::ordered_json j;
    j["lr"] = lr;
    j["batch_size"] = batch_size;
    j["max_epochs"] = max_epochs;
    j["clip_norm"] = clip_norm;
    j["segment_s"] = segment_s;
    j["early_stop_patience"] = early_stop_patience;
    j["loss"] = loss_kind_name(loss);
    j["seed"] = seed;
    j["max_steps"] = max_steps;
    j["checkpoint_dir"] = checkpoint_dir;
    return j;
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {"lr",        "batch_size", "max_epochs", "clip_norm",
                                                   "segment_s", "early_stop_patience", "loss", "seed",
                                                   "max_steps", "checkpoint_dir"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ConfigError("train: unknown config key '" + it.key() + "'");
    TrainConfig cfg;
    cfg.lr = j.value("lr", cfg.lr);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.max_epochs = j.value("max_epochs", cfg.max_epochs);
    cfg.clip_norm = j.value("clip_norm", cfg.clip_norm);
    cfg.segment_s = j.value("segment_s", cfg.segment_s);
    cfg.early_stop_patience = j.value("early_stop_patience", cfg.early_stop_patience);
    if (j.count("loss")) cfg.loss = loss_kind_from_name(j.at("loss").get<std::string>());
    cfg.seed = j.value("seed", cfg.seed);
    cfg.max_steps = j.value("max_steps", cfg.max_steps);
    cfg.checkpoint_dir = j.value("checkpoint_dir", cfg.checkpoint_dir);
    cfg.validate();
    return cfg;
}

AdamState AdamState::init(const std::vector<Tensor>& params) {
    AdamState s;
    s.m.reserve(params.size());
    s.v.reserve(params.size());
    for (const auto& p : params) {
        s.m.push_back(Tensor::zeros(p.shape(), p.dtype()));
        s.v.push_back(Tensor::zeros(p.shape(), p.dtype()));
    }
    return s;
}

double clip_global_norm(std::vector<Tensor>& grads, double max_norm) {
    if (max_norm <= 0) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
    double sq = 0;
    for (const auto& g : grads)
        for (int64_t i = 0; i < g.numel(); ++i) {
            const double v = g.at(i);
            sq += v * v;
        }
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw std::runtime_error("clip_global_norm: non-finite gradient");
    if (norm > max_norm) {
        const double scale = max_norm / norm;
        for (auto& g : grads) {
            std::vector<double> v = g.to_vector();
            for (auto& x : v) x *= scale;
            g = Tensor::from_vector(v, g.shape(), g.dtype());
        }
    }
    return norm;
}

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state, double lr) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw std::invalid_argument("adam_step: parameter/gradient/state arity mismatch");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        if (params[i].shape() != grads[i].shape())
            throw std::invalid_argument("adam_step: gradient shape mismatch at tensor " + std::to_string(i));
        std::vector<double> p = params[i].to_vector();
        std::vector<double> g = grads[i].to_vector();
        std::vector<double> m = state.m[i].to_vector();
        std::vector<double> v = state.v[i].to_vector();
        for (size_t k = 0; k < p.size(); ++k) {
            m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
            v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            p[k] -= lr * mhat / (std::sqrt(vhat) + state.eps);
        }
        params[i] = Tensor::from_vector(p, params[i].shape(), params[i].dtype());
        state.m[i] = Tensor::from_vector(m, state.m[i].shape(), state.m[i].dtype());
        state.v[i] = Tensor::from_vector(v, state.v[i].shape(), state.v[i].dtype());
    }
}

bool EarlyStop::update(double val) {
    ++seen_;
    if (best_epoch_ < 0 || val < best_) {
        best_ = val;
        best_epoch_ = seen_;
        since_best_ = 0;
        return false;
    }
    ++since_best_;
    return since_best_ >= patience_;
}

void TrainHistory::save(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    for (const auto& e : epochs) {
        nlohmann::ordered_json j;
        j["epoch"] = e.epoch;
        j["train_loss"] = e.train_loss;
        j["val_loss"] = e.val_loss;
        j["grad_norm_mean"] = e.grad_norm_mean;
        j["grad_norm_max"] = e.grad_norm_max;
        j["steps"] = e.steps;
        j["skipped_steps"] = e.skipped_steps;
        j["wall_s"] = e.wall_s;
        os << j.dump() << "\n";
    }
}

TrainData TrainData::from_manifest(const Manifest& manifest, const std::string& root) {
    TrainData data;
    for (const auto& rec : manifest.records) {
        data.mixtures.push_back(read_wav(root + "/" + rec.mixture_path));
        std::vector<Waveform> refs;
        for (const auto& r : rec.reference_paths) refs.push_back(read_wav(root + "/" + r));
        data.references.push_back(std::move(refs));
    }
    return data;
}

namespace {

struct Crop {
    size_t mixture = 0;
    int64_t offset = 0;
};

Waveform cut(const Waveform& w, int64_t offset, int64_t len) {
    Waveform out;
    out.sample_rate = w.sample_rate;
    const int64_t end = std::min<int64_t>(offset + len, w.length());
    out.samples.assign(w.samples.begin() + offset, w.samples.begin() + end);
    out.samples.resize(len, 0.0);
    return out;
}

struct StepOutcome {
    bool ok = false;
    double loss = 0.0;
    std::vector<Tensor> grads;
};

// forward (and optionally backward) for one crop on its own tape
StepOutcome run_crop(const FtrnnModel& model, const std::vector<Tensor>& params, const TrainData& data,
                     const Crop& crop, int64_t seg_len, LossKind kind, bool with_grads) {
    StepOutcome out;
    const Waveform mix = cut(data.mixtures[crop.mixture], crop.offset, seg_len);
    std::vector<Tensor> refs;
    bool silent_ref = false;
    for (const auto& r : data.references[crop.mixture]) {
        Waveform rc = cut(r, crop.offset, seg_len);
        double energy = 0;
        for (double v : rc.samples) energy += v * v;
        if (energy == 0.0) silent_ref = true;
        refs.push_back(Tensor::from_vector(rc.samples, {rc.length()}, model.config.dtype));
    }
    if (silent_ref) return out;  // crop hit an all-silent stretch; skipped

    Tape tape;
    Tensor loss;
    try {
        TapeScope scope(tape);
        std::vector<Tensor> est = forward_tensors(model, mix);
        loss = pit_loss(refs, est, kind).loss;
    } catch (const std::exception&) {
        return out;
    }
    out.loss = loss.item();
    if (!std::isfinite(out.loss)) return out;
    if (with_grads) {
        Gradients grads = backward(tape, loss);
        out.grads.reserve(params.size());
        for (const auto& p : params) out.grads.push_back(grads.get(p));
    }
    out.ok = true;
    return out;
}

double validation_loss(const FtrnnModel& model, const TrainData& val, int64_t seg_len, LossKind kind) {
    std::vector<StepOutcome> outcomes(val.size());
    const int workers = std::min<int>(thread_count(), static_cast<int>(val.size()));
    if (workers <= 1) {
        for (size_t i = 0; i < val.size(); ++i)
            outcomes[i] = run_crop(model, {}, val, Crop{i, 0}, seg_len, kind, false);
    } else {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int w = 0; w < workers; ++w)
            pool.emplace_back([&] {
                enter_parallel_region(true);
                for (size_t i = next.fetch_add(1); i < val.size(); i = next.fetch_add(1))
                    outcomes[i] = run_crop(model, {}, val, Crop{i, 0}, seg_len, kind, false);
                enter_parallel_region(false);
            });
        for (auto& t : pool) t.join();
    }
    double total = 0;
    int counted = 0;
    for (const auto& o : outcomes) {
        if (o.ok) {
            total += o.loss;
            ++counted;
        }
    }
    if (counted == 0) throw DataError("validation produced no finite losses");
    return total / counted;
}

void assign_params(FtrnnModel& model, const std::vector<Tensor>& params) {
    auto named = model.named_params();
    for (size_t i = 0; i < named.size(); ++i) *named[i].second = params[i];
}

}  // namespace

std::pair<FtrnnModel, TrainHistory> train(FtrnnModel model, const TrainData& train_set,
                                          const TrainData& val_set, const TrainConfig& cfg) {
    cfg.validate();
    if (train_set.size() == 0 || val_set.size() == 0) throw DataError("train: empty dataset");
    const int64_t seg_len = std::llround(cfg.segment_s * model.config.sample_rate);

    std::vector<Tensor> params;
    for (auto& [name, t] : model.named_params()) params.push_back(*t);
    AdamState adam = AdamState::init(params);
    Rng rng(Rng::derive_seed(cfg.seed, 0x7124));

    TrainHistory history;
    EarlyStop stopper(cfg.early_stop_patience);
    std::vector<Tensor> best_params = params;
    bool done = false;

    for (int epoch = 0; epoch < cfg.max_epochs && !done; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        // one shuffled pass over the training mixtures per epoch
        std::vector<size_t> order(train_set.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_int(0, static_cast<int64_t>(i) - 1)]);

        EpochStats stats;
        stats.epoch = epoch;
        double loss_sum = 0;
        int loss_n = 0;
        double norm_sum = 0;

        for (size_t pos = 0; pos < order.size() && !done; pos += cfg.batch_size) {
            if (cfg.max_steps > 0 && history.total_steps >= cfg.max_steps) break;
            std::vector<Crop> crops;
            for (int b = 0; b < cfg.batch_size; ++b) {
                const size_t mi = order[(pos + b) % order.size()];
                const int64_t max_off = std::max<int64_t>(0, train_set.mixtures[mi].length() - seg_len);
                crops.push_back(Crop{mi, max_off > 0 ? rng.uniform_int(0, max_off) : 0});
            }

            std::vector<StepOutcome> outcomes(crops.size());
            const int workers = std::min<int>(thread_count(), static_cast<int>(crops.size()));
            if (workers <= 1) {
                for (size_t b = 0; b < crops.size(); ++b)
                    outcomes[b] = run_crop(model, params, train_set, crops[b], seg_len, cfg.loss, true);
            } else {
                std::vector<std::thread> pool;
                std::atomic<size_t> next{0};
                for (int w = 0; w < workers; ++w)
                    pool.emplace_back([&] {
                        enter_parallel_region(true);
                        for (size_t b = next.fetch_add(1); b < crops.size(); b = next.fetch_add(1))
                            outcomes[b] = run_crop(model, params, train_set, crops[b], seg_len, cfg.loss, true);
                        enter_parallel_region(false);
                    });
                for (auto& t : pool) t.join();
            }

            bool all_ok = true;
            double batch_loss = 0;
            for (const auto& o : outcomes) {
                all_ok = all_ok && o.ok;
                batch_loss += o.loss;
            }
            stats.steps += 1;
            history.total_steps += 1;
            if (!all_ok) {
                stats.skipped_steps += 1;
                continue;
            }
            batch_loss /= static_cast<double>(outcomes.size());

            // batch-mean gradients in crop order
            std::vector<Tensor> grads = outcomes[0].grads;
            for (size_t b = 1; b < outcomes.size(); ++b)
                for (size_t i = 0; i < grads.size(); ++i) grads[i] = add(grads[i], outcomes[b].grads[i]);
            Tensor scale = Tensor::scalar(1.0 / static_cast<double>(outcomes.size()), grads[0].dtype());
            for (auto& g : grads) g = mul(g, scale);

            double norm = 0;
            try {
                norm = clip_global_norm(grads, cfg.clip_norm);
            } catch (const std::runtime_error&) {
                stats.skipped_steps += 1;
                continue;
            }
            adam_step(params, grads, adam, cfg.lr);
            loss_sum += batch_loss;
            loss_n += 1;
            norm_sum += norm;
            stats.grad_norm_max = std::max(stats.grad_norm_max, norm);
        }

        if (stats.steps > 0 && static_cast<double>(stats.skipped_steps) / stats.steps > 0.01)
            throw std::runtime_error("train: more than 1% of steps skipped in epoch " +
                                     std::to_string(epoch) + " (" + std::to_string(stats.skipped_steps) +
                                     "/" + std::to_string(stats.steps) + ")");

        assign_params(model, params);
        stats.train_loss = loss_n > 0 ? loss_sum / loss_n : 0.0;
        stats.grad_norm_mean = loss_n > 0 ? norm_sum / loss_n : 0.0;
        stats.val_loss = validation_loss(model, val_set, seg_len, cfg.loss);
        stats.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        history.epochs.push_back(stats);

        const bool stop = stopper.update(stats.val_loss);
        if (stopper.best_epoch() == stopper.epochs_seen()) best_params = params;
        if (!cfg.checkpoint_dir.empty()) {
            std::filesystem::create_directories(cfg.checkpoint_dir);
            assign_params(model, params);
            save_checkpoint(model, cfg.checkpoint_dir + "/last.ftrn");
            FtrnnModel best_model = model;
            assign_params(best_model, best_params);
            save_checkpoint(best_model, cfg.checkpoint_dir + "/best.ftrn");
            history.save(cfg.checkpoint_dir + "/history.jsonl");
        }
        if (stop || (cfg.max_steps > 0 && history.total_steps >= cfg.max_steps)) done = true;
    }

    history.best_epoch = stopper.best_epoch() - 1;
    history.best_val_loss = stopper.best();
    assign_params(model, best_params);
    if (!model.all_finite()) throw std::runtime_error("train: non-finite parameters after training");
    return {std::move(model), std::move(history)};
}

}  // namespace ftsep
