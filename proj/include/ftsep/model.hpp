#ifndef FTSEP_MODEL_HPP
#define FTSEP_MODEL_HPP

#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ftsep/audio.hpp"
#include "ftsep/tensor.hpp"

namespace ftsep {

struct FtrnnConfig {
    int64_t n_fft = 512;
    int64_t hop = 256;
    int sample_rate = 16000;
    int64_t feature_dim = 32;  // D
    int64_t num_blocks = 4;    // N
    int64_t hidden_full = 96;  // BLSTM hidden per direction, full-band module
    int64_t hidden_sub = 96;   // same, sub-band module
    int64_t num_speakers = 2;  // C
    bool post_norm = false;    // residual topology; pre-norm is the trained default
    Dtype dtype = Dtype::kF32;

    void validate() const;
    StftConfig stft() const { return StftConfig{n_fft, hop}; }
    int64_t bins() const { return n_fft / 2 + 1; }

    nlohmann::ordered_json to_json() const;
    static FtrnnConfig from_json(const nlohmann::json& j);

    /// The tiny desk-scale setup used by the overfit and gradient tests.
    static FtrnnConfig tiny();
};

struct BlstmParams {
    Tensor w_ih_fwd, w_hh_fwd, b_fwd;
    Tensor w_ih_rev, w_hh_rev, b_rev;
};

/// One full-band or sub-band module: LN -> BLSTM -> FFN, around a residual.
struct ModuleParams {
    Tensor ln_gamma, ln_beta;
    BlstmParams blstm;
    Tensor ffn_w, ffn_b;  // [2H, D], [D]
};

struct BlockParams {
    ModuleParams full;
    ModuleParams sub;
};

struct FtrnnModel {
    FtrnnConfig config;
    Tensor enc_w, enc_b;  // conv2d 2 -> D, 3x3
    std::vector<BlockParams> blocks;
    Tensor dec_w, dec_b;  // conv_transpose2d D -> 2C, 3x3

    /// Stable name -> parameter traversal; the checkpoint and optimizer order.
    std::vector<std::pair<std::string, Tensor*>> named_params();
    std::vector<std::pair<std::string, const Tensor*>> named_params() const;
    int64_t param_count() const;
    bool all_finite() const;
    FtrnnModel cast(Dtype dt) const;
};

/// Glorot-uniform weights, zero biases except LSTM forget-gate bias = 1,
/// LN gamma = 1 / beta = 0. Deterministic per seed.
FtrnnModel init_model(const FtrnnConfig& cfg, uint64_t seed);

/// One LSTM step on a batch: x_t [B,Din], h/c [B,H]. Returns (h', c').
/// Composed from tensor primitives; the fused sequence kernel must agree
/// with a chain of these.
std::pair<Tensor, Tensor> lstm_cell(const Tensor& x_t, const Tensor& h, const Tensor& c, const Tensor& w_ih,
                                    const Tensor& w_hh, const Tensor& b);

/// z: [T,F,D] -> [T,F,D]; BLSTM sweeps the frequency axis within each frame.
Tensor fullband_block(const Tensor& z, const ModuleParams& p, bool post_norm = false);
/// z: [T,F,D] -> [T,F,D]; BLSTM sweeps the time axis within each bin.
Tensor subband_block(const Tensor& z, const ModuleParams& p, bool post_norm = false);

/// Whole separator: mixture -> C waveform tensors of the input length.
/// Differentiable when a tape is active.
std::vector<Tensor> forward_tensors(const FtrnnModel& model, const Waveform& mixture);
/// Inference wrapper (never records).
std::vector<Waveform> forward(const FtrnnModel& model, const Waveform& mixture);

/// Checkpoint: magic "FTRN", u32 LE version, length-prefixed UTF-8 config
/// record, then (u32 name length, name, u32 rank, u64 dims, raw f32 LE data)
/// entries until EOF.
void save_checkpoint(const FtrnnModel& model, const std::string& path);
FtrnnModel load_checkpoint(const std::string& path, Dtype dtype = Dtype::kF32);

}  // namespace ftsep

#endif  // FTSEP_MODEL_HPP
