#include "ftsep/model.hpp"

#include <algorithm>

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "json.hpp"

namespace ftsep {

void FtrnnConfig::validate() const {
    stft().validate();
    if (feature_dim < 1 || num_blocks < 1) throw ConfigError("model: D and N must be >= 1");
    if (num_speakers < 2) throw ConfigError("model: C must be >= 2");
    if (hidden_full < 1 || hidden_sub < 1) throw ConfigError("model: hidden sizes must be >= 1");
    if (sample_rate < 1) throw ConfigError("model: sample_rate must be positive");
}

nlohmann::ordered_json FtrnnConfig::to_json() const {
    nlohmann::ordered_json j;
    j["n_fft"] = n_fft;
    j["hop"] = hop;
    j["sample_rate"] = sample_rate;
    j["feature_dim"] = feature_dim;
    j["num_blocks"] = num_blocks;
    j["hidden_full"] = hidden_full;
    j["hidden_sub"] = hidden_sub;
    j["num_speakers"] = num_speakers;
    j["post_norm"] = post_norm;
    return j;
}

FtrnnConfig FtrnnConfig::from_json(const nlohmann::json& j) {
    static const std::vector<std::string> known = {"n_fft",       "hop",        "sample_rate",
                                                   "feature_dim", "num_blocks", "hidden_full",
                                                   "hidden_sub",  "num_speakers", "post_norm"};
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw ConfigError("model: unknown config key '" + it.key() + "'");
    FtrnnConfig cfg;
    cfg.n_fft = j.value("n_fft", cfg.n_fft);
    cfg.hop = j.value("hop", cfg.hop);
    cfg.sample_rate = j.value("sample_rate", cfg.sample_rate);
    cfg.feature_dim = j.value("feature_dim", cfg.feature_dim);
    cfg.num_blocks = j.value("num_blocks", cfg.num_blocks);
    cfg.hidden_full = j.value("hidden_full", cfg.hidden_full);
    cfg.hidden_sub = j.value("hidden_sub", cfg.hidden_sub);
    cfg.num_speakers = j.value("num_speakers", cfg.num_speakers);
    cfg.post_norm = j.value("post_norm", cfg.post_norm);
    cfg.validate();
    return cfg;
}

FtrnnConfig FtrnnConfig::tiny() {
    FtrnnConfig cfg;
    cfg.n_fft = 128;
    cfg.hop = 64;
    cfg.sample_rate = 8000;
    cfg.feature_dim = 8;
    cfg.num_blocks = 2;
    cfg.hidden_full = 16;
    cfg.hidden_sub = 16;
    return cfg;
}

// ---------------------------------------------------------------------------
// Parameter traversal
// ---------------------------------------------------------------------------

namespace {

void walk_module(const std::string& prefix, ModuleParams& m,
                 std::vector<std::pair<std::string, Tensor*>>& out) {
    out.emplace_back(prefix + ".ln.gamma", &m.ln_gamma);
    out.emplace_back(prefix + ".ln.beta", &m.ln_beta);
    out.emplace_back(prefix + ".blstm.w_ih_fwd", &m.blstm.w_ih_fwd);
    out.emplace_back(prefix + ".blstm.w_hh_fwd", &m.blstm.w_hh_fwd);
    out.emplace_back(prefix + ".blstm.b_fwd", &m.blstm.b_fwd);
    out.emplace_back(prefix + ".blstm.w_ih_rev", &m.blstm.w_ih_rev);
    out.emplace_back(prefix + ".blstm.w_hh_rev", &m.blstm.w_hh_rev);
    out.emplace_back(prefix + ".blstm.b_rev", &m.blstm.b_rev);
    out.emplace_back(prefix + ".ffn.w", &m.ffn_w);
    out.emplace_back(prefix + ".ffn.b", &m.ffn_b);
}

}  // namespace

std::vector<std::pair<std::string, Tensor*>> FtrnnModel::named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("enc.w", &enc_w);
    out.emplace_back("enc.b", &enc_b);
    for (size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = "block" + std::to_string(i);
        walk_module(p + ".full", blocks[i].full, out);
        walk_module(p + ".sub", blocks[i].sub, out);
    }
    out.emplace_back("dec.w", &dec_w);
    out.emplace_back("dec.b", &dec_b);
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> FtrnnModel::named_params() const {
    auto mut = const_cast<FtrnnModel*>(this)->named_params();
    std::vector<std::pair<std::string, const Tensor*>> out;
    out.reserve(mut.size());
    for (auto& [name, t] : mut) out.emplace_back(name, t);
    return out;
}

int64_t FtrnnModel::param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : named_params()) n += t->numel();
    return n;
}

bool FtrnnModel::all_finite() const {
    for (const auto& [name, t] : named_params())
        for (int64_t i = 0; i < t->numel(); ++i)
            if (!std::isfinite(t->at(i))) return false;
    return true;
}

FtrnnModel FtrnnModel::cast(Dtype dt) const {
    FtrnnModel out = *this;
    out.config.dtype = dt;
    for (auto& [name, t] : out.named_params()) *t = t->cast(dt);
    return out;
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

namespace {

Tensor glorot(std::vector<int64_t> shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    int64_t n = 1;
    for (auto s : shape) n *= s;
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-limit, limit);
    return Tensor::from_vector(v, std::move(shape), Dtype::kF64);
}

Tensor lstm_bias(int64_t hidden) {
    std::vector<double> v(4 * hidden, 0.0);
    for (int64_t j = hidden; j < 2 * hidden; ++j) v[j] = 1.0;  // forget gate
    return Tensor::from_vector(v, {4 * hidden}, Dtype::kF64);
}

ModuleParams init_module(int64_t d, int64_t hidden, Rng& rng) {
    ModuleParams m;
    m.ln_gamma = Tensor::full({d}, 1.0, Dtype::kF64);
    m.ln_beta = Tensor::zeros({d}, Dtype::kF64);
    m.blstm.w_ih_fwd = glorot({4 * hidden, d}, d, 4 * hidden, rng);
    m.blstm.w_hh_fwd = glorot({4 * hidden, hidden}, hidden, 4 * hidden, rng);
    m.blstm.b_fwd = lstm_bias(hidden);
    m.blstm.w_ih_rev = glorot({4 * hidden, d}, d, 4 * hidden, rng);
    m.blstm.w_hh_rev = glorot({4 * hidden, hidden}, hidden, 4 * hidden, rng);
    m.blstm.b_rev = lstm_bias(hidden);
    m.ffn_w = glorot({2 * hidden, d}, 2 * hidden, d, rng);
    m.ffn_b = Tensor::zeros({d}, Dtype::kF64);
    return m;
}

}  // namespace

FtrnnModel init_model(const FtrnnConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(Rng::derive_seed(seed, 0x11717));
    FtrnnModel m;
    m.config = cfg;
    const int64_t d = cfg.feature_dim;
    m.enc_w = glorot({d, 2, 3, 3}, 2 * 9, d * 9, rng);
    m.enc_b = Tensor::zeros({d}, Dtype::kF64);
    m.blocks.resize(cfg.num_blocks);
    for (auto& block : m.blocks) {
        block.full = init_module(d, cfg.hidden_full, rng);
        block.sub = init_module(d, cfg.hidden_sub, rng);
    }
    const int64_t out_ch = 2 * cfg.num_speakers;
    m.dec_w = glorot({d, out_ch, 3, 3}, d * 9, out_ch * 9, rng);
    m.dec_b = Tensor::zeros({out_ch}, Dtype::kF64);
    if (cfg.dtype != Dtype::kF64) m = m.cast(cfg.dtype);
    return m;
}

// ---------------------------------------------------------------------------
// Blocks and forward
// ---------------------------------------------------------------------------

std::pair<Tensor, Tensor> lstm_cell(const Tensor& x_t, const Tensor& h, const Tensor& c, const Tensor& w_ih,
                                    const Tensor& w_hh, const Tensor& b) {
    const int64_t hidden = h.shape().back();
    Tensor pre = add(add(matmul(x_t, permute(w_ih, {1, 0})), matmul(h, permute(w_hh, {1, 0}))), b);
    Tensor gi = sigmoid(slice(pre, 1, 0, hidden));
    Tensor gf = sigmoid(slice(pre, 1, hidden, hidden));
    Tensor gg = tanh_op(slice(pre, 1, 2 * hidden, hidden));
    Tensor go = sigmoid(slice(pre, 1, 3 * hidden, hidden));
    Tensor c_next = add(mul(gf, c), mul(gi, gg));
    Tensor h_next = mul(go, tanh_op(c_next));
    return {h_next, c_next};
}

namespace {

Tensor blstm(const Tensor& x, const BlstmParams& p, int64_t hidden) {
    Tensor fwd = lstm(x, p.w_ih_fwd, p.w_hh_fwd, p.b_fwd, hidden, false);
    Tensor rev = lstm(x, p.w_ih_rev, p.w_hh_rev, p.b_rev, hidden, true);
    return concat({fwd, rev}, 2);
}

Tensor ffn_apply(const Tensor& h, const Tensor& w, const Tensor& b) {
    const auto s = h.shape();  // [A,B,2H]
    Tensor flat = reshape(h, {s[0] * s[1], s[2]});
    Tensor out = add(matmul(flat, w), b);
    return reshape(out, {s[0], s[1], w.shape()[1]});
}

Tensor module_apply(const Tensor& z, const ModuleParams& p, bool along_freq, bool post_norm) {
    const int64_t hidden = p.blstm.w_hh_fwd.shape()[1];
    auto branch = [&](const Tensor& in) {
        Tensor seq = along_freq ? permute(in, {1, 0, 2}) : in;  // [seq,batch,D]
        Tensor h = blstm(seq, p.blstm, hidden);
        Tensor out = ffn_apply(h, p.ffn_w, p.ffn_b);
        return along_freq ? permute(out, {1, 0, 2}) : out;
    };
    if (post_norm) return layer_norm(add(z, branch(z)), p.ln_gamma, p.ln_beta);
    return add(z, branch(layer_norm(z, p.ln_gamma, p.ln_beta)));
}

}  // namespace

Tensor fullband_block(const Tensor& z, const ModuleParams& p, bool post_norm) {
    if (z.rank() != 3) throw std::invalid_argument("fullband_block: want [T,F,D], got " + shape_str(z.shape()));
    return module_apply(z, p, true, post_norm);
}

Tensor subband_block(const Tensor& z, const ModuleParams& p, bool post_norm) {
    if (z.rank() != 3) throw std::invalid_argument("subband_block: want [T,F,D], got " + shape_str(z.shape()));
    return module_apply(z, p, false, post_norm);
}

std::vector<Tensor> forward_tensors(const FtrnnModel& model, const Waveform& mixture) {
    const FtrnnConfig& cfg = model.config;
    if (mixture.length() < cfg.hop)
        throw std::invalid_argument("forward: input of " + std::to_string(mixture.length()) +
                                    " samples is shorter than one hop (" + std::to_string(cfg.hop) + ")");
    Spectrogram spec = stft(mixture, cfg.stft());

    // channel 0 = real, channel 1 = imaginary
    std::vector<double> packed(2 * spec.t * spec.f);
    for (int64_t i = 0; i < spec.t * spec.f; ++i) {
        packed[i] = spec.frames[i].real();
        packed[spec.t * spec.f + i] = spec.frames[i].imag();
    }
    Tensor grid = Tensor::from_vector(packed, {2, spec.t, spec.f}, cfg.dtype);

    Tensor enc = conv2d(grid, model.enc_w, model.enc_b);  // [D,T,F]
    Tensor z = permute(enc, {1, 2, 0});                   // [T,F,D]
    for (const auto& block : model.blocks) {
        z = fullband_block(z, block.full, cfg.post_norm);
        z = subband_block(z, block.sub, cfg.post_norm);
    }
    Tensor dec_in = permute(z, {2, 0, 1});                           // [D,T,F]
    Tensor dec = conv_transpose2d(dec_in, model.dec_w, model.dec_b);  // [2C,T,F]

    std::vector<Tensor> out;
    out.reserve(cfg.num_speakers);
    for (int64_t c = 0; c < cfg.num_speakers; ++c) {
        Tensor spk = slice(dec, 0, 2 * c, 2);  // complex spectral mapping, no mask
        out.push_back(istft_grid(spk, cfg.n_fft, cfg.hop, mixture.length()));
    }
    return out;
}

std::vector<Waveform> forward(const FtrnnModel& model, const Waveform& mixture) {
    TapePause pause;  // inference never records, even if the caller holds a tape
    std::vector<Tensor> outs = forward_tensors(model, mixture);
    std::vector<Waveform> waves(outs.size());
    for (size_t c = 0; c < outs.size(); ++c) {
        waves[c].sample_rate = mixture.sample_rate;
        waves[c].samples = outs[c].to_vector();
    }
    return waves;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr uint32_t kCheckpointVersion = 1;

void wr_u32(std::ofstream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<char*>(b), 4);
}
void wr_u64(std::ofstream& os, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<char*>(b), 8);
}
uint32_t rd_u32(std::ifstream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw DataError("checkpoint: truncated");
    return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<uint32_t>(b[3]) << 24);
}
uint64_t rd_u64(std::ifstream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    if (!is) throw DataError("checkpoint: truncated");
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void save_checkpoint(const FtrnnModel& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path);
    os.write("FTRN", 4);
    wr_u32(os, kCheckpointVersion);
    const std::string cfg = model.config.to_json().dump();
    wr_u32(os, static_cast<uint32_t>(cfg.size()));
    os.write(cfg.data(), cfg.size());
    for (const auto& [name, t] : model.named_params()) {
        wr_u32(os, static_cast<uint32_t>(name.size()));
        os.write(name.data(), name.size());
        wr_u32(os, static_cast<uint32_t>(t->rank()));
        for (int64_t d : t->shape()) wr_u64(os, static_cast<uint64_t>(d));
        Tensor f32 = t->cast(Dtype::kF32);
        auto span = f32.data<float>();
        static_assert(sizeof(float) == 4);
        os.write(reinterpret_cast<const char*>(span.data()), span.size() * 4);
    }
    if (!os) throw IoError("short write to " + path);
}

FtrnnModel load_checkpoint(const std::string& path, Dtype dtype) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "FTRN", 4) != 0) throw DataError(path + ": bad checkpoint magic");
    const uint32_t version = rd_u32(is);
    if (version != kCheckpointVersion)
        throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
    const uint32_t cfg_len = rd_u32(is);
    std::string cfg_str(cfg_len, '\0');
    is.read(cfg_str.data(), cfg_len);
    if (!is) throw DataError(path + ": truncated config record");
    FtrnnConfig cfg;
    try {
        cfg = FtrnnConfig::from_json(nlohmann::json::parse(cfg_str));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(path + ": malformed config record: " + e.what());
    }
    cfg.dtype = dtype;
    cfg.validate();

    FtrnnModel model = init_model(cfg, 0);
    auto params = model.named_params();
    std::map<std::string, Tensor*> by_name;
    for (auto& [name, t] : params) by_name[name] = t;
    std::map<std::string, bool> seen;

    while (true) {
        is.peek();
        if (is.eof()) break;
        const uint32_t name_len = rd_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const uint32_t rank = rd_u32(is);
        std::vector<int64_t> shape(rank);
        for (uint32_t i = 0; i < rank; ++i) shape[i] = static_cast<int64_t>(rd_u64(is));
        int64_t n = 1;
        for (auto d : shape) n *= d;
        std::vector<float> raw(n);
        is.read(reinterpret_cast<char*>(raw.data()), n * 4);
        if (!is) throw DataError(path + ": truncated tensor '" + name + "'");
        auto it = by_name.find(name);
        if (it == by_name.end()) throw DataError(path + ": unexpected tensor '" + name + "'");
        if (it->second->shape() != shape)
            throw DataError(path + ": tensor '" + name + "' has shape " + shape_str(shape) +
                            ", config wants " + shape_str(it->second->shape()));
        std::vector<double> vals(raw.begin(), raw.end());
        *it->second = Tensor::from_vector(vals, shape, dtype);
        seen[name] = true;
    }
    for (auto& [name, t] : params)
        if (!seen.count(name)) throw DataError(path + ": missing tensor '" + name + "'");
    return model;
}

}  // namespace ftsep
