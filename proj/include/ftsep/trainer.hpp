#ifndef FTSEP_TRAINER_HPP
#define FTSEP_TRAINER_HPP

#include <string>
#include <vector>

#include "ftsep/losses.hpp"
#include "ftsep/mixture.hpp"
#include "ftsep/model.hpp"

namespace ftsep {

struct TrainConfig {
    double lr = 1e-3;
    int batch_size = 24;
    int max_epochs = 200;
    double clip_norm = 5.0;
    double segment_s = 10.0;
    int early_stop_patience = 10;
    LossKind loss = LossKind::kSiSdrPit;
    uint64_t seed = 0;
    int max_steps = 0;           // optional cap on optimizer steps; 0 = epochs only
    std::string checkpoint_dir;  // when set: best.ftrn, last.ftrn, history.jsonl

    void validate() const;
    nlohmann::ordered_json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

/// Bias-corrected Adam accumulators, parallel to the parameter list.
struct AdamState {
    int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    static AdamState init(const std::vector<Tensor>& params);
};

/// Scales all gradients by max_norm/norm when the joint L2 norm exceeds
/// max_norm. Returns the pre-clip norm. Throws on non-finite gradients.
double clip_global_norm(std::vector<Tensor>& grads, double max_norm);

void adam_step(std::vector<Tensor>& params, const std::vector<Tensor>& grads, AdamState& state, double lr);

/// Strict-improvement early stopping counter.
class EarlyStop {
public:
    explicit EarlyStop(int patience) : patience_(patience) {}
    /// Feeds one validation value; returns true when training should stop.
    bool update(double val);
    double best() const { return best_; }
    int best_epoch() const { return best_epoch_; }
    int epochs_seen() const { return seen_; }

private:
    int patience_;
    int seen_ = 0;
    int best_epoch_ = -1;
    int since_best_ = 0;
    double best_ = 0;
};

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double grad_norm_mean = 0.0;
    double grad_norm_max = 0.0;
    int steps = 0;
    int skipped_steps = 0;
    double wall_s = 0.0;
};

struct TrainHistory {
    std::vector<EpochStats> epochs;
    int best_epoch = -1;
    double best_val_loss = 0.0;
    int total_steps = 0;

    void save(const std::string& path) const;
};

/// In-memory dataset: mixtures plus per-speaker references.
struct TrainData {
    std::vector<Waveform> mixtures;
    std::vector<std::vector<Waveform>> references;

    static TrainData from_manifest(const Manifest& manifest, const std::string& root);
    size_t size() const { return mixtures.size(); }
};

/// PIT training: random segment crops per epoch, per-segment permutation
/// search, batch-mean gradients, global-norm clipping, Adam. Keeps the
/// best-validation parameters. Non-finite steps are skipped and counted;
/// more than 1% skipped steps in an epoch aborts.
std::pair<FtrnnModel, TrainHistory> train(FtrnnModel model, const TrainData& train_set,
                                          const TrainData& val_set, const TrainConfig& cfg);

}  // namespace ftsep

#endif  // FTSEP_TRAINER_HPP
