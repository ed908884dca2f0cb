#include "ftsep/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <complex>
#include <cstring>
#include <sstream>

#include "ftsep/fft.hpp"

namespace ftsep {

namespace {
std::atomic<uint64_t> g_next_id{1};
thread_local Tape* t_active_tape = nullptr;
}  // namespace

// ---------------------------------------------------------------------------
// Tensor storage
// ---------------------------------------------------------------------------

struct Tensor::Payload {
    uint64_t id;
    Dtype dt;
    std::vector<int64_t> shape;
    std::vector<float> f;
    std::vector<double> d;
};

struct TensorRW {
    static Tensor uninit(std::vector<int64_t> shape, Dtype dt) {
        int64_t n = 1;
        for (int64_t s : shape) {
            if (s < 1) throw std::invalid_argument("tensor dims must be >= 1, got " + shape_str(shape));
            n *= s;
        }
        Tensor t;
        t.p_ = std::make_shared<Tensor::Payload>();
        t.p_->id = g_next_id.fetch_add(1);
        t.p_->dt = dt;
        t.p_->shape = std::move(shape);
        if (dt == Dtype::kF32)
            t.p_->f.resize(n);
        else
            t.p_->d.resize(n);
        return t;
    }

    template <typename T>
    static T* mut(Tensor& t);
};

template <>
float* TensorRW::mut<float>(Tensor& t) {
    return t.p_->f.data();
}
template <>
double* TensorRW::mut<double>(Tensor& t) {
    return t.p_->d.data();
}

const char* dtype_name(Dtype dt) { return dt == Dtype::kF32 ? "single" : "double"; }

std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

Tensor Tensor::zeros(std::vector<int64_t> shape, Dtype dt) { return TensorRW::uninit(std::move(shape), dt); }

Tensor Tensor::full(std::vector<int64_t> shape, double value, Dtype dt) {
    Tensor t = TensorRW::uninit(std::move(shape), dt);
    if (dt == Dtype::kF32)
        std::fill(t.p_->f.begin(), t.p_->f.end(), static_cast<float>(value));
    else
        std::fill(t.p_->d.begin(), t.p_->d.end(), value);
    return t;
}

Tensor Tensor::scalar(double value, Dtype dt) { return full({1}, value, dt); }

Tensor Tensor::from_vector(const std::vector<double>& values, std::vector<int64_t> shape, Dtype dt) {
    Tensor t = TensorRW::uninit(std::move(shape), dt);
    if (t.numel() != static_cast<int64_t>(values.size()))
        throw std::invalid_argument("from_vector: " + std::to_string(values.size()) + " values for shape " +
                                    shape_str(t.shape()));
    if (dt == Dtype::kF32)
        for (size_t i = 0; i < values.size(); ++i) t.p_->f[i] = static_cast<float>(values[i]);
    else
        std::copy(values.begin(), values.end(), t.p_->d.begin());
    return t;
}

const std::vector<int64_t>& Tensor::shape() const {
    if (!p_) throw std::logic_error("use of undefined tensor");
    return p_->shape;
}

int64_t Tensor::numel() const {
    int64_t n = 1;
    for (int64_t s : shape()) n *= s;
    return n;
}

Dtype Tensor::dtype() const {
    if (!p_) throw std::logic_error("use of undefined tensor");
    return p_->dt;
}

uint64_t Tensor::id() const {
    if (!p_) throw std::logic_error("use of undefined tensor");
    return p_->id;
}

template <>
std::span<const float> Tensor::data<float>() const {
    if (dtype() != Dtype::kF32) throw std::logic_error("tensor is not single precision");
    return {p_->f.data(), p_->f.size()};
}

template <>
std::span<const double> Tensor::data<double>() const {
    if (dtype() != Dtype::kF64) throw std::logic_error("tensor is not double precision");
    return {p_->d.data(), p_->d.size()};
}

double Tensor::at(int64_t i) const {
    if (i < 0 || i >= numel()) throw std::out_of_range("tensor index " + std::to_string(i));
    return dtype() == Dtype::kF32 ? static_cast<double>(p_->f[i]) : p_->d[i];
}

double Tensor::item() const {
    if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
    return at(0);
}

std::vector<double> Tensor::to_vector() const {
    std::vector<double> out(numel());
    if (dtype() == Dtype::kF32)
        for (int64_t i = 0; i < numel(); ++i) out[i] = p_->f[i];
    else
        out.assign(p_->d.begin(), p_->d.end());
    return out;
}

Tensor Tensor::cast(Dtype dt) const {
    if (dt == dtype()) return *this;
    Tensor t = TensorRW::uninit(shape(), dt);
    const int64_t n = numel();
    if (dt == Dtype::kF32)
        for (int64_t i = 0; i < n; ++i) t.p_->f[i] = static_cast<float>(p_->d[i]);
    else
        for (int64_t i = 0; i < n; ++i) t.p_->d[i] = p_->f[i];
    return t;
}

Tensor Tensor::with_entry(int64_t flat_index, double value) const {
    Tensor t = TensorRW::uninit(shape(), dtype());
    if (dtype() == Dtype::kF32) {
        t.p_->f = p_->f;
        t.p_->f.at(flat_index) = static_cast<float>(value);
    } else {
        t.p_->d = p_->d;
        t.p_->d.at(flat_index) = value;
    }
    return t;
}

// ---------------------------------------------------------------------------
// Attrs
// ---------------------------------------------------------------------------

Attrs& Attrs::set(const std::string& key, int64_t v) {
    m_[key] = v;
    return *this;
}
Attrs& Attrs::set(const std::string& key, double v) {
    m_[key] = v;
    return *this;
}
Attrs& Attrs::set(const std::string& key, bool v) {
    m_[key] = v;
    return *this;
}
Attrs& Attrs::set(const std::string& key, std::vector<int64_t> v) {
    m_[key] = std::move(v);
    return *this;
}

bool Attrs::has(const std::string& key) const { return m_.count(key) > 0; }

int64_t Attrs::get_int(const std::string& key) const {
    auto it = m_.find(key);
    if (it == m_.end()) throw std::invalid_argument("missing attribute '" + key + "'");
    return std::get<int64_t>(it->second);
}
int64_t Attrs::get_int(const std::string& key, int64_t fallback) const {
    auto it = m_.find(key);
    return it == m_.end() ? fallback : std::get<int64_t>(it->second);
}
double Attrs::get_float(const std::string& key) const {
    auto it = m_.find(key);
    if (it == m_.end()) throw std::invalid_argument("missing attribute '" + key + "'");
    return std::get<double>(it->second);
}
double Attrs::get_float(const std::string& key, double fallback) const {
    auto it = m_.find(key);
    return it == m_.end() ? fallback : std::get<double>(it->second);
}
bool Attrs::get_bool(const std::string& key, bool fallback) const {
    auto it = m_.find(key);
    return it == m_.end() ? fallback : std::get<bool>(it->second);
}
const std::vector<int64_t>& Attrs::get_ints(const std::string& key) const {
    auto it = m_.find(key);
    if (it == m_.end()) throw std::invalid_argument("missing attribute '" + key + "'");
    return std::get<std::vector<int64_t>>(it->second);
}

// ---------------------------------------------------------------------------
// Op table
// ---------------------------------------------------------------------------

const char* op_name(OpKind kind) {
    switch (kind) {
        case OpKind::kMatmul: return "matmul";
        case OpKind::kAdd: return "add";
        case OpKind::kSub: return "sub";
        case OpKind::kMul: return "mul";
        case OpKind::kDiv: return "div";
        case OpKind::kSigmoid: return "sigmoid";
        case OpKind::kTanh: return "tanh";
        case OpKind::kLog: return "log";
        case OpKind::kSum: return "sum";
        case OpKind::kMean: return "mean";
        case OpKind::kLayerNorm: return "layer_norm";
        case OpKind::kConv2d: return "conv2d";
        case OpKind::kConvTranspose2d: return "conv_transpose2d";
        case OpKind::kLstm: return "lstm";
        case OpKind::kIstft: return "istft";
        case OpKind::kConcat: return "concat";
        case OpKind::kPermute: return "permute";
        case OpKind::kReshape: return "reshape";
        case OpKind::kSlice: return "slice";
    }
    throw std::invalid_argument("unknown primitive id " + std::to_string(static_cast<int>(kind)));
}

const std::vector<OpKind>& all_op_kinds() {
    static const std::vector<OpKind> kinds = {
        OpKind::kMatmul,  OpKind::kAdd,       OpKind::kSub,
        OpKind::kMul,     OpKind::kDiv,       OpKind::kSigmoid,
        OpKind::kTanh,    OpKind::kLog,       OpKind::kSum,
        OpKind::kMean,    OpKind::kLayerNorm, OpKind::kConv2d,
        OpKind::kConvTranspose2d, OpKind::kLstm, OpKind::kIstft,
        OpKind::kConcat,  OpKind::kPermute,   OpKind::kReshape,
        OpKind::kSlice,
    };
    return kinds;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

void Tape::clear() {
    nodes_.clear();
    by_output_.clear();
}

bool Tape::produced(uint64_t tensor_id) const { return by_output_.count(tensor_id) > 0; }

Tape* active_tape() { return t_active_tape; }

TapeScope::TapeScope(Tape& tape) : prev_(t_active_tape) { t_active_tape = &tape; }
TapeScope::~TapeScope() { t_active_tape = prev_; }

TapePause::TapePause() : prev_(t_active_tape) { t_active_tape = nullptr; }
TapePause::~TapePause() { t_active_tape = prev_; }

// ---------------------------------------------------------------------------
// Kernel helpers
// ---------------------------------------------------------------------------

namespace {

[[noreturn]] void shape_error(OpKind kind, const std::string& detail) {
    throw std::invalid_argument(std::string(op_name(kind)) + ": shape mismatch, " + detail);
}

void check_same_dtype(OpKind kind, const std::vector<Tensor>& inputs) {
    for (size_t i = 1; i < inputs.size(); ++i)
        if (inputs[i].dtype() != inputs[0].dtype())
            throw std::invalid_argument(std::string(op_name(kind)) + ": mixed dtypes (" +
                                        dtype_name(inputs[0].dtype()) + " vs " + dtype_name(inputs[i].dtype()) +
                                        ")");
}

enum class BinMode { kSame, kScalarRhs, kScalarLhs, kRowVecRhs };

BinMode binary_mode(OpKind kind, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) return BinMode::kSame;
    if (b.numel() == 1) return BinMode::kScalarRhs;
    if (a.numel() == 1) return BinMode::kScalarLhs;
    if (kind == OpKind::kAdd && a.rank() == 2 && b.rank() == 1 && b.shape()[0] == a.shape()[1])
        return BinMode::kRowVecRhs;
    shape_error(kind, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <typename T, typename F>
void ew_binary(const Tensor& a, const Tensor& b, Tensor& out, BinMode mode, F f) {
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    T* po = TensorRW::mut<T>(out);
    const int64_t n = out.numel();
    switch (mode) {
        case BinMode::kSame:
            for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
            break;
        case BinMode::kScalarRhs: {
            const T s = pb[0];
            for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], s);
            break;
        }
        case BinMode::kScalarLhs: {
            const T s = pa[0];
            for (int64_t i = 0; i < n; ++i) po[i] = f(s, pb[i]);
            break;
        }
        case BinMode::kRowVecRhs: {
            const int64_t cols = b.numel();
            for (int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i % cols]);
            break;
        }
    }
}

// out[m,n] = sum_k a[m,k] b[k,n]
template <typename T>
void k_matmul(const T* a, const T* b, T* out, int64_t m, int64_t k, int64_t n) {
    parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            T* orow = out + i * n;
            std::fill(orow, orow + n, T(0));
            const T* arow = a + i * k;
            for (int64_t kk = 0; kk < k; ++kk) {
                const T av = arow[kk];
                const T* brow = b + kk * n;
                for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    });
}

// out[m,n] = sum_k a[m,k] b[n,k]   (b transposed)
template <typename T>
void k_matmul_nt(const T* a, const T* b, T* out, int64_t m, int64_t k, int64_t n) {
    parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            const T* arow = a + i * k;
            T* orow = out + i * n;
            for (int64_t j = 0; j < n; ++j) {
                const T* brow = b + j * k;
                T acc = 0;
                for (int64_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
                orow[j] = acc;
            }
        }
    });
}

// out[m,n] = sum_k a[k,m] b[k,n]   (a transposed)
template <typename T>
void k_matmul_tn(const T* a, const T* b, T* out, int64_t m, int64_t k, int64_t n) {
    parallel_for(m, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) {
            T* orow = out + i * n;
            std::fill(orow, orow + n, T(0));
            for (int64_t kk = 0; kk < k; ++kk) {
                const T av = a[kk * m + i];
                const T* brow = b + kk * n;
                for (int64_t j = 0; j < n; ++j) orow[j] += av * brow[j];
            }
        }
    });
}

std::vector<int64_t> strides_of(const std::vector<int64_t>& shape) {
    std::vector<int64_t> st(shape.size());
    int64_t acc = 1;
    for (int64_t i = static_cast<int64_t>(shape.size()) - 1; i >= 0; --i) {
        st[i] = acc;
        acc *= shape[i];
    }
    return st;
}

std::vector<double> hann_periodic(int64_t n) {
    std::vector<double> w(n);
    for (int64_t k = 0; k < n; ++k) w[k] = 0.5 * (1.0 - std::cos(2.0 * fft::kPi * k / static_cast<double>(n)));
    return w;
}

// Single-precision activations on an exp2-based polynomial (~2e-7 relative).
// The recurrent kernels spend most of their time here; the double path keeps
// libm so the gradient oracle stays exact.
inline float fast_exp(float x) {
    if (x < -87.0f) return 0.0f;
    if (x > 88.0f) x = 88.0f;
    const float t = x * 1.442695041f;
    const float fi = std::floor(t);
    const float f = t - fi;
    // minimax fit of 2^f on [0, 1)
    float p = 1.0f + f * (0.693147180f + f * (0.240226507f + f * (0.0555041087f +
              f * (0.00961812910f + f * 0.00133335581f))));
    const int32_t e = static_cast<int32_t>(fi);
    int32_t bits;
    std::memcpy(&bits, &p, 4);
    bits += e << 23;
    std::memcpy(&p, &bits, 4);
    return p;
}

template <typename T>
inline T act_sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}
template <>
inline float act_sigmoid<float>(float x) {
    return 1.0f / (1.0f + fast_exp(-x));
}

template <typename T>
inline T act_tanh(T x) {
    return std::tanh(x);
}
template <>
inline float act_tanh<float>(float x) {
    if (x > 10.0f) return 1.0f;
    if (x < -10.0f) return -1.0f;
    return 1.0f - 2.0f / (fast_exp(2.0f * x) + 1.0f);
}

// dst[i0,i1,...] = src[i_{axes[0]}, i_{axes[1]}, ...]
template <typename T>
void k_permute(const Tensor& src, const std::vector<int64_t>& axes, Tensor& dst) {
    const auto src_st = strides_of(src.shape());
    const auto dst_st = strides_of(dst.shape());
    const int64_t r = src.rank();
    const T* ps = src.data<T>().data();
    T* pd = TensorRW::mut<T>(dst);
    const int64_t n = dst.numel();
    parallel_for(n, [&](int64_t lo, int64_t hi) {
        std::vector<int64_t> idx(r);
        for (int64_t i = lo; i < hi; ++i) {
            int64_t rem = i;
            for (int64_t a = 0; a < r; ++a) {
                idx[a] = rem / dst_st[a];
                rem %= dst_st[a];
            }
            int64_t s = 0;
            for (int64_t a = 0; a < r; ++a) s += idx[a] * src_st[axes[a]];
            pd[i] = ps[s];
        }
    });
}

// ---------------------------------------------------------------------------
// LSTM kernel
// ---------------------------------------------------------------------------

struct LstmDims {
    int64_t S, B, Din, H;
    bool reverse;
};

// gates layout along 4H: [input, forget, cell, output], stored post-activation
// at their chronological index.
template <typename T>
void k_lstm_forward(const T* x, const T* w_ih, const T* w_hh, const T* b, T* h_all, T* gates, T* c_all,
                    const LstmDims& d) {
    const int64_t S = d.S, B = d.B, Din = d.Din, H = d.H, G = 4 * H;
    // input projection for the whole sequence in one pass; the recursion
    // only adds the hidden-state term
    std::vector<T> pre_x(static_cast<size_t>(S) * B * G);
    k_matmul_nt<T>(x, w_ih, pre_x.data(), S * B, Din, G);
    parallel_for(B, [&](int64_t blo, int64_t bhi) {
        std::vector<T> hprev(H), cprev(H), pre(G);
        for (int64_t bb = blo; bb < bhi; ++bb) {
            std::fill(hprev.begin(), hprev.end(), T(0));
            std::fill(cprev.begin(), cprev.end(), T(0));
            for (int64_t step = 0; step < S; ++step) {
                const int64_t t = d.reverse ? S - 1 - step : step;
                const T* px_row = pre_x.data() + (t * B + bb) * G;
                for (int64_t g = 0; g < G; ++g) {
                    T acc = px_row[g] + b[g];
                    const T* wh = w_hh + g * H;
                    for (int64_t j = 0; j < H; ++j) acc += wh[j] * hprev[j];
                    pre[g] = acc;
                }
                T* gt = gates + (t * B + bb) * G;
                T* ct = c_all + (t * B + bb) * H;
                T* ht = h_all + (t * B + bb) * H;
                for (int64_t j = 0; j < H; ++j) {
                    const T gi = act_sigmoid<T>(pre[j]);
                    const T gf = act_sigmoid<T>(pre[H + j]);
                    const T gg = act_tanh<T>(pre[2 * H + j]);
                    const T go = act_sigmoid<T>(pre[3 * H + j]);
                    const T c = gf * cprev[j] + gi * gg;
                    const T h = go * act_tanh<T>(c);
                    gt[j] = gi;
                    gt[H + j] = gf;
                    gt[2 * H + j] = gg;
                    gt[3 * H + j] = go;
                    ct[j] = c;
                    ht[j] = h;
                    cprev[j] = c;
                    hprev[j] = h;
                }
            }
        }
    });
}

// Phase 1 computes pre-activation adjoints per (t, b); phase 2 contracts them
// into parameter and input gradients with a fixed summation order so results
// do not depend on thread count.
template <typename T>
void k_lstm_backward(const T* x, const T* w_ih, const T* w_hh, const T* h_all, const T* gates, const T* c_all,
                     const T* g_out, T* dx, T* dw_ih, T* dw_hh, T* db, const LstmDims& d) {
    const int64_t S = d.S, B = d.B, Din = d.Din, H = d.H, G = 4 * H;
    std::vector<T> dpre_all(static_cast<size_t>(S) * B * G);
    const int64_t step_dir = d.reverse ? 1 : -1;  // chronological walk opposite to processing order
    parallel_for(B, [&](int64_t blo, int64_t bhi) {
        std::vector<T> dh_carry(H), dc_carry(H);
        for (int64_t bb = blo; bb < bhi; ++bb) {
            std::fill(dh_carry.begin(), dh_carry.end(), T(0));
            std::fill(dc_carry.begin(), dc_carry.end(), T(0));
            for (int64_t step = S - 1; step >= 0; --step) {
                const int64_t t = d.reverse ? S - 1 - step : step;
                const int64_t tprev = t + step_dir;  // chronological predecessor in processing order
                const T* gt = gates + (t * B + bb) * G;
                const T* ct = c_all + (t * B + bb) * H;
                const T* cprev = (step > 0) ? c_all + (tprev * B + bb) * H : nullptr;
                const T* go_row = g_out + (t * B + bb) * H;
                T* dpre = dpre_all.data() + (t * B + bb) * G;
                for (int64_t j = 0; j < H; ++j) {
                    const T gi = gt[j], gf = gt[H + j], gg = gt[2 * H + j], goo = gt[3 * H + j];
                    const T tc = act_tanh<T>(ct[j]);
                    const T dh = go_row[j] + dh_carry[j];
                    const T do_ = dh * tc;
                    const T dc = dh * goo * (T(1) - tc * tc) + dc_carry[j];
                    const T di = dc * gg;
                    const T dg = dc * gi;
                    const T df = dc * (cprev ? cprev[j] : T(0));
                    dc_carry[j] = dc * gf;
                    dpre[j] = di * gi * (T(1) - gi);
                    dpre[H + j] = df * gf * (T(1) - gf);
                    dpre[2 * H + j] = dg * (T(1) - gg * gg);
                    dpre[3 * H + j] = do_ * goo * (T(1) - goo);
                }
                // dh_carry = w_hh^T dpre
                for (int64_t j = 0; j < H; ++j) {
                    T acc = 0;
                    for (int64_t g = 0; g < G; ++g) acc += w_hh[g * H + j] * dpre[g];
                    dh_carry[j] = acc;
                }
            }
        }
    });
    // dx[t,b,:] = w_ih^T dpre[t,b,:]
    parallel_for(S * B, [&](int64_t lo, int64_t hi) {
        for (int64_t r = lo; r < hi; ++r) {
            const T* dpre = dpre_all.data() + r * G;
            T* dxr = dx + r * Din;
            for (int64_t j = 0; j < Din; ++j) {
                T acc = 0;
                for (int64_t g = 0; g < G; ++g) acc += w_ih[g * Din + j] * dpre[g];
                dxr[j] = acc;
            }
        }
    });
    // dw_ih[g,:] = sum_{t,b} dpre[t,b,g] * x[t,b,:]
    parallel_for(G, [&](int64_t glo, int64_t ghi) {
        for (int64_t g = glo; g < ghi; ++g) {
            T* wrow = dw_ih + g * Din;
            std::fill(wrow, wrow + Din, T(0));
            T bacc = 0;
            for (int64_t r = 0; r < S * B; ++r) {
                const T dv = dpre_all[r * G + g];
                bacc += dv;
                const T* xr = x + r * Din;
                for (int64_t j = 0; j < Din; ++j) wrow[j] += dv * xr[j];
            }
            db[g] = bacc;
        }
    });
    // dw_hh[g,:] = sum_{t,b} dpre[t,b,g] * hprev[t,b,:]; hprev is h_all shifted
    // one step against the processing direction (zero at the first step).
    parallel_for(G, [&](int64_t glo, int64_t ghi) {
        for (int64_t g = glo; g < ghi; ++g) {
            T* wrow = dw_hh + g * H;
            std::fill(wrow, wrow + H, T(0));
            for (int64_t t = 0; t < S; ++t) {
                const int64_t tprev = d.reverse ? t + 1 : t - 1;
                if (tprev < 0 || tprev >= S) continue;
                for (int64_t bb = 0; bb < B; ++bb) {
                    const T dv = dpre_all[(t * B + bb) * G + g];
                    const T* hp = h_all + (tprev * B + bb) * H;
                    for (int64_t j = 0; j < H; ++j) wrow[j] += dv * hp[j];
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// iSTFT kernel (weighted overlap-add, periodic Hann, squared-window norm)
// ---------------------------------------------------------------------------

struct IstftDims {
    int64_t n_fft, hop, T, F, out_len;
};

template <typename T>
void k_istft_forward(const T* re, const T* im, T* out, const IstftDims& d) {
    const int64_t n = d.n_fft;
    const std::vector<double> w = hann_periodic(n);
    const int64_t padded = (d.T - 1) * d.hop + n;
    std::vector<double> acc(padded, 0.0), norm(padded, 0.0);
    std::vector<std::complex<double>> spec(n);
    for (int64_t t = 0; t < d.T; ++t) {
        const T* rrow = re + t * d.F;
        const T* irow = im + t * d.F;
        spec[0] = {static_cast<double>(rrow[0]), static_cast<double>(irow[0])};
        spec[n / 2] = {static_cast<double>(rrow[d.F - 1]), static_cast<double>(irow[d.F - 1])};
        for (int64_t k = 1; k < n / 2; ++k) {
            spec[k] = {static_cast<double>(rrow[k]), static_cast<double>(irow[k])};
            spec[n - k] = std::conj(spec[k]);
        }
        fft::inverse(spec);
        const int64_t off = t * d.hop;
        for (int64_t i = 0; i < n; ++i) {
            acc[off + i] += spec[i].real() * w[i];
            norm[off + i] += w[i] * w[i];
        }
    }
    const int64_t lead = n / 2;
    for (int64_t i = 0; i < d.out_len; ++i) {
        const double nv = std::max(norm[lead + i], 1e-10);
        out[i] = static_cast<T>(acc[lead + i] / nv);
    }
}

template <typename T>
void k_istft_backward(const T* g, T* dre, T* dim, const IstftDims& d) {
    const int64_t n = d.n_fft;
    const std::vector<double> w = hann_periodic(n);
    const int64_t padded = (d.T - 1) * d.hop + n;
    std::vector<double> norm(padded, 0.0);
    for (int64_t t = 0; t < d.T; ++t)
        for (int64_t i = 0; i < n; ++i) norm[t * d.hop + i] += w[i] * w[i];
    std::vector<double> gp(padded, 0.0);
    const int64_t lead = n / 2;
    for (int64_t i = 0; i < d.out_len; ++i) gp[lead + i] = static_cast<double>(g[i]) / std::max(norm[lead + i], 1e-10);
    std::vector<std::complex<double>> frame(n);
    for (int64_t t = 0; t < d.T; ++t) {
        const int64_t off = t * d.hop;
        for (int64_t i = 0; i < n; ++i) frame[i] = {gp[off + i] * w[i], 0.0};
        // adjoint of Re(IFFT): forward DFT scaled by 1/n
        fft::forward(frame);
        T* drow = dre + t * d.F;
        T* irow = dim + t * d.F;
        const double inv_n = 1.0 / static_cast<double>(n);
        drow[0] = static_cast<T>(frame[0].real() * inv_n);
        irow[0] = static_cast<T>(frame[0].imag() * inv_n);
        drow[d.F - 1] = static_cast<T>(frame[n / 2].real() * inv_n);
        irow[d.F - 1] = static_cast<T>(frame[n / 2].imag() * inv_n);
        for (int64_t k = 1; k < n / 2; ++k) {
            const auto a = frame[k] * inv_n;
            const auto bconj = std::conj(frame[n - k] * inv_n);
            drow[k] = static_cast<T>(a.real() + bconj.real());
            irow[k] = static_cast<T>(a.imag() + bconj.imag());
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward dispatch
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void run_forward(OpKind kind, const std::vector<Tensor>& in, const Attrs& attrs, Tensor& out,
                 std::vector<Tensor>& saved) {
    switch (kind) {
        case OpKind::kMatmul: {
            const auto& a = in[0];
            const auto& b = in[1];
            k_matmul<T>(a.data<T>().data(), b.data<T>().data(), TensorRW::mut<T>(out), a.shape()[0], a.shape()[1],
                        b.shape()[1]);
            break;
        }
        case OpKind::kAdd:
            ew_binary<T>(in[0], in[1], out, binary_mode(kind, in[0], in[1]), [](T a, T b) { return a + b; });
            break;
        case OpKind::kSub:
            ew_binary<T>(in[0], in[1], out, binary_mode(kind, in[0], in[1]), [](T a, T b) { return a - b; });
            break;
        case OpKind::kMul:
            ew_binary<T>(in[0], in[1], out, binary_mode(kind, in[0], in[1]), [](T a, T b) { return a * b; });
            break;
        case OpKind::kDiv:
            ew_binary<T>(in[0], in[1], out, binary_mode(kind, in[0], in[1]), [](T a, T b) { return a / b; });
            break;
        case OpKind::kSigmoid: {
            const T* px = in[0].data<T>().data();
            T* po = TensorRW::mut<T>(out);
            for (int64_t i = 0; i < out.numel(); ++i) po[i] = act_sigmoid<T>(px[i]);
            break;
        }
        case OpKind::kTanh: {
            const T* px = in[0].data<T>().data();
            T* po = TensorRW::mut<T>(out);
            for (int64_t i = 0; i < out.numel(); ++i) po[i] = act_tanh<T>(px[i]);
            break;
        }
        case OpKind::kLog: {
            const T* px = in[0].data<T>().data();
            T* po = TensorRW::mut<T>(out);
            for (int64_t i = 0; i < out.numel(); ++i) po[i] = std::log(px[i]);
            break;
        }
        case OpKind::kSum:
        case OpKind::kMean: {
            const T* px = in[0].data<T>().data();
            double acc = 0;
            for (int64_t i = 0; i < in[0].numel(); ++i) acc += px[i];
            if (kind == OpKind::kMean) acc /= static_cast<double>(in[0].numel());
            TensorRW::mut<T>(out)[0] = static_cast<T>(acc);
            break;
        }
        case OpKind::kLayerNorm: {
            const auto& x = in[0];
            const int64_t d = x.shape().back();
            const int64_t outer = x.numel() / d;
            const double eps = attrs.get_float("eps", 1e-5);
            const T* px = x.data<T>().data();
            const T* pg = in[1].data<T>().data();
            const T* pb = in[2].data<T>().data();
            T* po = TensorRW::mut<T>(out);
            Tensor mean_t = Tensor::zeros({outer}, x.dtype());
            Tensor rstd_t = Tensor::zeros({outer}, x.dtype());
            T* pm = TensorRW::mut<T>(mean_t);
            T* pr = TensorRW::mut<T>(rstd_t);
            parallel_for(outer, [&](int64_t lo, int64_t hi) {
                for (int64_t r = lo; r < hi; ++r) {
                    const T* row = px + r * d;
                    double mu = 0;
                    for (int64_t j = 0; j < d; ++j) mu += row[j];
                    mu /= d;
                    double var = 0;
                    for (int64_t j = 0; j < d; ++j) {
                        const double v = row[j] - mu;
                        var += v * v;
                    }
                    var /= d;
                    const double rstd = 1.0 / std::sqrt(var + eps);
                    pm[r] = static_cast<T>(mu);
                    pr[r] = static_cast<T>(rstd);
                    T* orow = po + r * d;
                    for (int64_t j = 0; j < d; ++j)
                        orow[j] = static_cast<T>((row[j] - mu) * rstd * pg[j] + pb[j]);
                }
            });
            saved.push_back(mean_t);
            saved.push_back(rstd_t);
            break;
        }
        case OpKind::kConv2d: {
            const auto& x = in[0];
            const auto& wt = in[1];
            const auto& bs = in[2];
            const int64_t ci = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
            const int64_t co = wt.shape()[0], kh = wt.shape()[2], kw = wt.shape()[3];
            const int64_t s = attrs.get_int("stride", 1), p = attrs.get_int("pad", 1);
            const int64_t ho = out.shape()[1], wo = out.shape()[2];
            const T* px = x.data<T>().data();
            const T* pw = wt.data<T>().data();
            const T* pb = bs.data<T>().data();
            T* po = TensorRW::mut<T>(out);
            parallel_for(co, [&](int64_t lo, int64_t hi) {
                for (int64_t oc = lo; oc < hi; ++oc) {
                    for (int64_t y = 0; y < ho; ++y)
                        for (int64_t xx = 0; xx < wo; ++xx) {
                            double acc = pb[oc];
                            for (int64_t ic = 0; ic < ci; ++ic)
                                for (int64_t ky = 0; ky < kh; ++ky) {
                                    const int64_t iy = y * s + ky - p;
                                    if (iy < 0 || iy >= h) continue;
                                    for (int64_t kx = 0; kx < kw; ++kx) {
                                        const int64_t ix = xx * s + kx - p;
                                        if (ix < 0 || ix >= wd) continue;
                                        acc += px[(ic * h + iy) * wd + ix] *
                                               pw[((oc * ci + ic) * kh + ky) * kw + kx];
                                    }
                                }
                            po[(oc * ho + y) * wo + xx] = static_cast<T>(acc);
                        }
                }
            });
            break;
        }
        case OpKind::kConvTranspose2d: {
            const auto& x = in[0];
            const auto& wt = in[1];
            const auto& bs = in[2];
            const int64_t ci = x.shape()[0], hi_ = x.shape()[1], wi = x.shape()[2];
            const int64_t co = wt.shape()[1], kh = wt.shape()[2], kw = wt.shape()[3];
            const int64_t s = attrs.get_int("stride", 1), p = attrs.get_int("pad", 1);
            const int64_t ho = out.shape()[1], wo = out.shape()[2];
            const T* px = x.data<T>().data();
            const T* pw = wt.data<T>().data();
            const T* pb = bs.data<T>().data();
            T* po = TensorRW::mut<T>(out);
            parallel_for(co, [&](int64_t lo, int64_t hi) {
                for (int64_t oc = lo; oc < hi; ++oc) {
                    for (int64_t oy = 0; oy < ho; ++oy)
                        for (int64_t ox = 0; ox < wo; ++ox) {
                            double acc = pb[oc];
                            for (int64_t ky = 0; ky < kh; ++ky) {
                                const int64_t ny = oy + p - ky;
                                if (ny % s != 0) continue;
                                const int64_t iy = ny / s;
                                if (iy < 0 || iy >= hi_) continue;
                                for (int64_t kx = 0; kx < kw; ++kx) {
                                    const int64_t nx = ox + p - kx;
                                    if (nx % s != 0) continue;
                                    const int64_t ix = nx / s;
                                    if (ix < 0 || ix >= wi) continue;
                                    for (int64_t ic = 0; ic < ci; ++ic)
                                        acc += px[(ic * hi_ + iy) * wi + ix] *
                                               pw[((ic * co + oc) * kh + ky) * kw + kx];
                                }
                            }
                            po[(oc * ho + oy) * wo + ox] = static_cast<T>(acc);
                        }
                }
            });
            break;
        }
        case OpKind::kLstm: {
            const auto& x = in[0];
            LstmDims d{x.shape()[0], x.shape()[1], x.shape()[2], attrs.get_int("hidden"),
                       attrs.get_bool("reverse", false)};
            Tensor gates = Tensor::zeros({d.S, d.B, 4 * d.H}, x.dtype());
            Tensor c_all = Tensor::zeros({d.S, d.B, d.H}, x.dtype());
            k_lstm_forward<T>(x.data<T>().data(), in[1].data<T>().data(), in[2].data<T>().data(),
                              in[3].data<T>().data(), TensorRW::mut<T>(out), TensorRW::mut<T>(gates),
                              TensorRW::mut<T>(c_all), d);
            saved.push_back(gates);
            saved.push_back(c_all);
            break;
        }
        case OpKind::kIstft: {
            const auto& x = in[0];
            IstftDims d{attrs.get_int("n_fft"), attrs.get_int("hop"), x.shape()[1], x.shape()[2],
                        attrs.get_int("out_len")};
            const T* base = x.data<T>().data();
            k_istft_forward<T>(base, base + d.T * d.F, TensorRW::mut<T>(out), d);
            break;
        }
        case OpKind::kConcat: {
            const int64_t axis = attrs.get_int("axis");
            const auto st = strides_of(out.shape());
            const int64_t inner = st[axis];
            const int64_t outer = out.numel() / (inner * out.shape()[axis]);
            T* po = TensorRW::mut<T>(out);
            int64_t off = 0;
            for (const auto& t : in) {
                const int64_t len = t.shape()[axis];
                const T* pt = t.data<T>().data();
                for (int64_t r = 0; r < outer; ++r)
                    std::memcpy(po + (r * out.shape()[axis] + off) * inner, pt + r * len * inner,
                                sizeof(T) * len * inner);
                off += len;
            }
            break;
        }
        case OpKind::kPermute:
            k_permute<T>(in[0], attrs.get_ints("axes"), out);
            break;
        case OpKind::kReshape: {
            const T* px = in[0].data<T>().data();
            T* po = TensorRW::mut<T>(out);
            std::memcpy(po, px, sizeof(T) * out.numel());
            break;
        }
        case OpKind::kSlice: {
            const int64_t axis = attrs.get_int("axis");
            const int64_t start = attrs.get_int("start");
            const auto st = strides_of(in[0].shape());
            const int64_t inner = st[axis];
            const int64_t len = out.shape()[axis];
            const int64_t outer = out.numel() / (inner * len);
            const T* px = in[0].data<T>().data();
            T* po = TensorRW::mut<T>(out);
            for (int64_t r = 0; r < outer; ++r)
                std::memcpy(po + r * len * inner, px + (r * in[0].shape()[axis] + start) * inner,
                            sizeof(T) * len * inner);
            break;
        }
    }
}

std::vector<int64_t> infer_shape(OpKind kind, const std::vector<Tensor>& in, const Attrs& attrs) {
    switch (kind) {
        case OpKind::kMatmul: {
            if (in.size() != 2) shape_error(kind, "expects 2 inputs");
            if (in[0].rank() != 2 || in[1].rank() != 2 || in[0].shape()[1] != in[1].shape()[0])
                shape_error(kind, shape_str(in[0].shape()) + " vs " + shape_str(in[1].shape()));
            return {in[0].shape()[0], in[1].shape()[1]};
        }
        case OpKind::kAdd:
        case OpKind::kSub:
        case OpKind::kMul:
        case OpKind::kDiv: {
            if (in.size() != 2) shape_error(kind, "expects 2 inputs");
            switch (binary_mode(kind, in[0], in[1])) {
                case BinMode::kScalarLhs: return in[1].shape();
                default: return in[0].shape();
            }
        }
        case OpKind::kSigmoid:
        case OpKind::kTanh:
        case OpKind::kLog:
            if (in.size() != 1) shape_error(kind, "expects 1 input");
            return in[0].shape();
        case OpKind::kSum:
        case OpKind::kMean:
            if (in.size() != 1) shape_error(kind, "expects 1 input");
            return {1};
        case OpKind::kLayerNorm: {
            if (in.size() != 3) shape_error(kind, "expects x, gamma, beta");
            const int64_t d = in[0].shape().back();
            if (in[1].numel() != d || in[2].numel() != d)
                shape_error(kind, "gamma/beta " + shape_str(in[1].shape()) + "/" + shape_str(in[2].shape()) +
                                      " vs normalized axis " + std::to_string(d));
            if (d < 2 && in[0].dtype() == Dtype::kF32)
                throw std::invalid_argument("layer_norm: normalized axis of size " + std::to_string(d) +
                                            " is degenerate in single precision");
            return in[0].shape();
        }
        case OpKind::kConv2d: {
            if (in.size() != 3) shape_error(kind, "expects x, w, b");
            if (in[0].rank() != 3 || in[1].rank() != 4) shape_error(kind, "x must be [C,H,W], w [Co,Ci,kh,kw]");
            if (in[1].shape()[1] != in[0].shape()[0])
                shape_error(kind, "x " + shape_str(in[0].shape()) + " vs w " + shape_str(in[1].shape()));
            if (in[2].numel() != in[1].shape()[0]) shape_error(kind, "bias size");
            const int64_t s = attrs.get_int("stride", 1), p = attrs.get_int("pad", 1);
            const int64_t ho = (in[0].shape()[1] + 2 * p - in[1].shape()[2]) / s + 1;
            const int64_t wo = (in[0].shape()[2] + 2 * p - in[1].shape()[3]) / s + 1;
            if (ho < 1 || wo < 1) shape_error(kind, "empty output for input " + shape_str(in[0].shape()));
            return {in[1].shape()[0], ho, wo};
        }
        case OpKind::kConvTranspose2d: {
            if (in.size() != 3) shape_error(kind, "expects x, w, b");
            if (in[0].rank() != 3 || in[1].rank() != 4) shape_error(kind, "x must be [C,H,W], w [Ci,Co,kh,kw]");
            if (in[1].shape()[0] != in[0].shape()[0])
                shape_error(kind, "x " + shape_str(in[0].shape()) + " vs w " + shape_str(in[1].shape()));
            if (in[2].numel() != in[1].shape()[1]) shape_error(kind, "bias size");
            const int64_t s = attrs.get_int("stride", 1), p = attrs.get_int("pad", 1);
            const int64_t ho = (in[0].shape()[1] - 1) * s - 2 * p + in[1].shape()[2];
            const int64_t wo = (in[0].shape()[2] - 1) * s - 2 * p + in[1].shape()[3];
            if (ho < 1 || wo < 1) shape_error(kind, "empty output for input " + shape_str(in[0].shape()));
            return {in[1].shape()[1], ho, wo};
        }
        case OpKind::kLstm: {
            if (in.size() != 4) shape_error(kind, "expects x, w_ih, w_hh, b");
            const int64_t h = attrs.get_int("hidden");
            if (in[0].rank() != 3) shape_error(kind, "x must be [S,B,Din], got " + shape_str(in[0].shape()));
            const int64_t din = in[0].shape()[2];
            if (in[1].shape() != std::vector<int64_t>{4 * h, din})
                shape_error(kind, "w_ih " + shape_str(in[1].shape()) + " expected [" + std::to_string(4 * h) +
                                      "," + std::to_string(din) + "]");
            if (in[2].shape() != std::vector<int64_t>{4 * h, h})
                shape_error(kind, "w_hh " + shape_str(in[2].shape()));
            if (in[3].numel() != 4 * h) shape_error(kind, "bias " + shape_str(in[3].shape()));
            return {in[0].shape()[0], in[0].shape()[1], h};
        }
        case OpKind::kIstft: {
            if (in.size() != 1) shape_error(kind, "expects 1 input");
            const int64_t n = attrs.get_int("n_fft"), hop = attrs.get_int("hop"), L = attrs.get_int("out_len");
            if (n < 2 || n % 2 != 0) throw std::invalid_argument("istft: n_fft must be even and >= 2");
            if (hop < 1 || hop > n) throw std::invalid_argument("istft: hop must be in [1, n_fft]");
            if (in[0].rank() != 3 || in[0].shape()[0] != 2)
                shape_error(kind, "x must be [2,T,F], got " + shape_str(in[0].shape()));
            if (in[0].shape()[2] != n / 2 + 1)
                shape_error(kind, "F=" + std::to_string(in[0].shape()[2]) + " vs n_fft/2+1=" +
                                      std::to_string(n / 2 + 1));
            const int64_t padded = (in[0].shape()[1] - 1) * hop + n;
            if (L < 1 || n / 2 + L > padded)
                shape_error(kind, "out_len " + std::to_string(L) + " not covered by " +
                                      std::to_string(in[0].shape()[1]) + " frames");
            return {L};
        }
        case OpKind::kConcat: {
            if (in.empty()) shape_error(kind, "expects at least 1 input");
            const int64_t axis = attrs.get_int("axis");
            auto shape = in[0].shape();
            if (axis < 0 || axis >= static_cast<int64_t>(shape.size())) shape_error(kind, "bad axis");
            for (size_t i = 1; i < in.size(); ++i) {
                auto s = in[i].shape();
                if (s.size() != shape.size()) shape_error(kind, shape_str(shape) + " vs " + shape_str(s));
                for (size_t a = 0; a < s.size(); ++a)
                    if (static_cast<int64_t>(a) != axis && s[a] != shape[a])
                        shape_error(kind, shape_str(shape) + " vs " + shape_str(s));
                shape[axis] += s[axis];
            }
            return shape;
        }
        case OpKind::kPermute: {
            const auto& axes = attrs.get_ints("axes");
            if (static_cast<int64_t>(axes.size()) != in[0].rank())
                shape_error(kind, "axes rank " + std::to_string(axes.size()) + " vs tensor rank " +
                                      std::to_string(in[0].rank()));
            std::vector<bool> seen(axes.size(), false);
            std::vector<int64_t> shape(axes.size());
            for (size_t a = 0; a < axes.size(); ++a) {
                if (axes[a] < 0 || axes[a] >= in[0].rank() || seen[axes[a]])
                    shape_error(kind, "axes are not a permutation");
                seen[axes[a]] = true;
                shape[a] = in[0].shape()[axes[a]];
            }
            return shape;
        }
        case OpKind::kReshape: {
            const auto& shape = attrs.get_ints("shape");
            int64_t n = 1;
            for (int64_t s : shape) n *= s;
            if (n != in[0].numel())
                shape_error(kind, shape_str(in[0].shape()) + " to " + shape_str(shape));
            return shape;
        }
        case OpKind::kSlice: {
            const int64_t axis = attrs.get_int("axis");
            const int64_t start = attrs.get_int("start");
            const int64_t len = attrs.get_int("len");
            if (axis < 0 || axis >= in[0].rank()) shape_error(kind, "bad axis");
            if (start < 0 || len < 1 || start + len > in[0].shape()[axis])
                shape_error(kind, "range [" + std::to_string(start) + "," + std::to_string(start + len) +
                                      ") on axis of size " + std::to_string(in[0].shape()[axis]));
            auto shape = in[0].shape();
            shape[axis] = len;
            return shape;
        }
    }
    throw std::invalid_argument("unknown primitive id " + std::to_string(static_cast<int>(kind)));
}

}  // namespace

Tensor apply_primitive(OpKind kind, const std::vector<Tensor>& inputs, const Attrs& attrs) {
    if (inputs.empty()) throw std::invalid_argument(std::string(op_name(kind)) + ": no inputs");
    for (const auto& t : inputs)
        if (!t.defined()) throw std::invalid_argument(std::string(op_name(kind)) + ": undefined input");
    check_same_dtype(kind, inputs);
    auto out_shape = infer_shape(kind, inputs, attrs);
    Tensor out = TensorRW::uninit(std::move(out_shape), inputs[0].dtype());
    std::vector<Tensor> saved;
    if (inputs[0].dtype() == Dtype::kF32)
        run_forward<float>(kind, inputs, attrs, out, saved);
    else
        run_forward<double>(kind, inputs, attrs, out, saved);
    if (Tape* tape = active_tape()) {
        tape->by_output_[out.id()] = tape->nodes_.size();
        tape->nodes_.push_back(TapeNode{kind, attrs, inputs, out, std::move(saved)});
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) { return apply_primitive(OpKind::kMatmul, {a, b}); }
Tensor add(const Tensor& a, const Tensor& b) { return apply_primitive(OpKind::kAdd, {a, b}); }
Tensor sub(const Tensor& a, const Tensor& b) { return apply_primitive(OpKind::kSub, {a, b}); }
Tensor mul(const Tensor& a, const Tensor& b) { return apply_primitive(OpKind::kMul, {a, b}); }
Tensor divide(const Tensor& a, const Tensor& b) { return apply_primitive(OpKind::kDiv, {a, b}); }
Tensor sigmoid(const Tensor& x) { return apply_primitive(OpKind::kSigmoid, {x}); }
Tensor tanh_op(const Tensor& x) { return apply_primitive(OpKind::kTanh, {x}); }
Tensor log_op(const Tensor& x) { return apply_primitive(OpKind::kLog, {x}); }
Tensor sum_all(const Tensor& x) { return apply_primitive(OpKind::kSum, {x}); }
Tensor mean_all(const Tensor& x) { return apply_primitive(OpKind::kMean, {x}); }

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    return apply_primitive(OpKind::kLayerNorm, {x, gamma, beta}, Attrs().set("eps", eps));
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride, int64_t pad) {
    return apply_primitive(OpKind::kConv2d, {x, w, b}, Attrs().set("stride", stride).set("pad", pad));
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride, int64_t pad) {
    return apply_primitive(OpKind::kConvTranspose2d, {x, w, b}, Attrs().set("stride", stride).set("pad", pad));
}

Tensor lstm(const Tensor& x, const Tensor& w_ih, const Tensor& w_hh, const Tensor& b, int64_t hidden,
            bool reverse) {
    return apply_primitive(OpKind::kLstm, {x, w_ih, w_hh, b},
                           Attrs().set("hidden", hidden).set("reverse", reverse));
}

Tensor istft_grid(const Tensor& x, int64_t n_fft, int64_t hop, int64_t out_len) {
    return apply_primitive(OpKind::kIstft, {x},
                           Attrs().set("n_fft", n_fft).set("hop", hop).set("out_len", out_len));
}

Tensor concat(const std::vector<Tensor>& xs, int64_t axis) {
    return apply_primitive(OpKind::kConcat, xs, Attrs().set("axis", axis));
}

Tensor permute(const Tensor& x, std::vector<int64_t> axes) {
    return apply_primitive(OpKind::kPermute, {x}, Attrs().set("axes", std::move(axes)));
}

Tensor reshape(const Tensor& x, std::vector<int64_t> shape) {
    return apply_primitive(OpKind::kReshape, {x}, Attrs().set("shape", std::move(shape)));
}

Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t len) {
    return apply_primitive(OpKind::kSlice, {x},
                           Attrs().set("axis", axis).set("start", start).set("len", len));
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tensor raw_binary(const Tensor& a, const Tensor& b, BinMode mode, T (*f)(T, T)) {
    Tensor out = TensorRW::uninit(mode == BinMode::kScalarLhs ? b.shape() : a.shape(), a.dtype());
    ew_binary<T>(a, b, out, mode, f);
    return out;
}

// gradient accumulation without touching the tape
Tensor grad_add(const Tensor& a, const Tensor& b) {
    Tensor out = TensorRW::uninit(a.shape(), a.dtype());
    if (a.dtype() == Dtype::kF32)
        ew_binary<float>(a, b, out, BinMode::kSame, [](float x, float y) { return x + y; });
    else
        ew_binary<double>(a, b, out, BinMode::kSame, [](double x, double y) { return x + y; });
    return out;
}

template <typename T>
void op_backward_typed(const TapeNode& node, const Tensor& g, std::vector<Tensor>& din) {
    const OpKind kind = node.kind;
    const auto& in = node.inputs;
    const T* pg = g.data<T>().data();
    auto fresh = [](const Tensor& like) { return TensorRW::uninit(like.shape(), like.dtype()); };
    switch (kind) {
        case OpKind::kMatmul: {
            const int64_t m = in[0].shape()[0], k = in[0].shape()[1], n = in[1].shape()[1];
            din[0] = fresh(in[0]);
            din[1] = fresh(in[1]);
            k_matmul_nt<T>(pg, in[1].data<T>().data(), TensorRW::mut<T>(din[0]), m, n, k);
            k_matmul_tn<T>(in[0].data<T>().data(), pg, TensorRW::mut<T>(din[1]), k, m, n);
            break;
        }
        case OpKind::kAdd:
        case OpKind::kSub: {
            const double sgn = (kind == OpKind::kSub) ? -1.0 : 1.0;
            auto reduce_to = [&](const Tensor& target, double scale) {
                if (target.shape() == g.shape()) {
                    if (scale == 1.0) return g;
                    Tensor s = Tensor::scalar(scale, g.dtype());
                    return raw_binary<T>(g, s, BinMode::kScalarRhs, [](T x, T y) { return x * y; });
                }
                if (target.numel() == 1) {
                    double acc = 0;
                    for (int64_t i = 0; i < g.numel(); ++i) acc += pg[i];
                    return Tensor::scalar(acc * scale, g.dtype());
                }
                // row-vector bias on [N,D]
                const int64_t cols = target.numel();
                Tensor out = fresh(target);
                T* po = TensorRW::mut<T>(out);
                std::fill(po, po + cols, T(0));
                for (int64_t i = 0; i < g.numel(); ++i) po[i % cols] += pg[i];
                if (scale != 1.0)
                    for (int64_t i = 0; i < cols; ++i) po[i] = static_cast<T>(po[i] * scale);
                return out;
            };
            din[0] = reduce_to(in[0], 1.0);
            din[1] = reduce_to(in[1], sgn);
            break;
        }
        case OpKind::kMul:
        case OpKind::kDiv: {
            const BinMode mode = binary_mode(kind, in[0], in[1]);
            auto mul_raw = [&](const Tensor& a, const Tensor& b, BinMode m2) {
                return raw_binary<T>(a, b, m2, [](T x, T y) { return x * y; });
            };
            auto div_raw = [&](const Tensor& a, const Tensor& b, BinMode m2) {
                return raw_binary<T>(a, b, m2, [](T x, T y) { return x / y; });
            };
            auto reduce_like = [&](const Tensor& full, const Tensor& target) {
                if (target.shape() == full.shape()) return full;
                double acc = 0;
                const T* pf = full.data<T>().data();
                for (int64_t i = 0; i < full.numel(); ++i) acc += pf[i];
                return Tensor::scalar(acc, full.dtype());
            };
            if (kind == OpKind::kMul) {
                BinMode mb = (mode == BinMode::kScalarRhs) ? BinMode::kScalarRhs
                             : (mode == BinMode::kScalarLhs) ? BinMode::kScalarLhs
                                                             : BinMode::kSame;
                Tensor da_full = (mb == BinMode::kScalarLhs) ? mul_raw(g, in[1], BinMode::kSame)
                                                             : mul_raw(g, in[1], mb);
                Tensor db_full = (mb == BinMode::kScalarRhs) ? mul_raw(g, in[0], BinMode::kSame)
                                                             : mul_raw(g, in[0], mb == BinMode::kScalarLhs
                                                                                     ? BinMode::kScalarRhs
                                                                                     : BinMode::kSame);
                din[0] = reduce_like(da_full, in[0]);
                din[1] = reduce_like(db_full, in[1]);
            } else {
                // z = a / b: da = g / b ; db = -g a / b^2
                BinMode mb = mode;
                Tensor da_full = div_raw(g, in[1], mb == BinMode::kScalarLhs ? BinMode::kSame : mb);
                Tensor ga = mul_raw(g, in[0], mb == BinMode::kScalarLhs ? BinMode::kScalarRhs : BinMode::kSame);
                Tensor b2 = mul_raw(in[1], in[1], BinMode::kSame);
                Tensor db_full = div_raw(ga, b2, mb == BinMode::kScalarRhs ? BinMode::kScalarRhs : BinMode::kSame);
                T* pd = TensorRW::mut<T>(db_full);
                for (int64_t i = 0; i < db_full.numel(); ++i) pd[i] = -pd[i];
                din[0] = reduce_like(da_full, in[0]);
                din[1] = reduce_like(db_full, in[1]);
            }
            break;
        }
        case OpKind::kSigmoid: {
            const T* py = node.output.data<T>().data();
            din[0] = fresh(in[0]);
            T* pd = TensorRW::mut<T>(din[0]);
            for (int64_t i = 0; i < g.numel(); ++i) pd[i] = pg[i] * py[i] * (T(1) - py[i]);
            break;
        }
        case OpKind::kTanh: {
            const T* py = node.output.data<T>().data();
            din[0] = fresh(in[0]);
            T* pd = TensorRW::mut<T>(din[0]);
            for (int64_t i = 0; i < g.numel(); ++i) pd[i] = pg[i] * (T(1) - py[i] * py[i]);
            break;
        }
        case OpKind::kLog: {
            const T* px = in[0].data<T>().data();
            din[0] = fresh(in[0]);
            T* pd = TensorRW::mut<T>(din[0]);
            for (int64_t i = 0; i < g.numel(); ++i) pd[i] = pg[i] / px[i];
            break;
        }
        case OpKind::kSum:
        case OpKind::kMean: {
            const double scale = kind == OpKind::kMean ? 1.0 / static_cast<double>(in[0].numel()) : 1.0;
            din[0] = Tensor::full(in[0].shape(), g.item() * scale, g.dtype());
            break;
        }
        case OpKind::kLayerNorm: {
            const int64_t d = in[0].shape().back();
            const int64_t outer = in[0].numel() / d;
            const T* px = in[0].data<T>().data();
            const T* pgam = in[1].data<T>().data();
            const T* pm = node.saved[0].data<T>().data();
            const T* pr = node.saved[1].data<T>().data();
            din[0] = fresh(in[0]);
            din[1] = fresh(in[1]);
            din[2] = fresh(in[2]);
            T* pdx = TensorRW::mut<T>(din[0]);
            T* pdg = TensorRW::mut<T>(din[1]);
            T* pdb = TensorRW::mut<T>(din[2]);
            std::fill(pdg, pdg + d, T(0));
            std::fill(pdb, pdb + d, T(0));
            for (int64_t r = 0; r < outer; ++r) {
                const T* xr = px + r * d;
                const T* gr = pg + r * d;
                T* dxr = pdx + r * d;
                const double mu = pm[r], rstd = pr[r];
                double m1 = 0, m2 = 0;
                for (int64_t j = 0; j < d; ++j) {
                    const double xh = (xr[j] - mu) * rstd;
                    const double dgj = gr[j] * pgam[j];
                    m1 += dgj;
                    m2 += dgj * xh;
                    pdg[j] += static_cast<T>(gr[j] * xh);
                    pdb[j] += gr[j];
                }
                m1 /= d;
                m2 /= d;
                for (int64_t j = 0; j < d; ++j) {
                    const double xh = (xr[j] - mu) * rstd;
                    dxr[j] = static_cast<T>(rstd * (gr[j] * pgam[j] - m1 - xh * m2));
                }
            }
            break;
        }
        case OpKind::kConv2d: {
            const int64_t ci = in[0].shape()[0], h = in[0].shape()[1], wd = in[0].shape()[2];
            const int64_t co = in[1].shape()[0], kh = in[1].shape()[2], kw = in[1].shape()[3];
            const int64_t s = node.attrs.get_int("stride", 1), p = node.attrs.get_int("pad", 1);
            const int64_t ho = node.output.shape()[1], wo = node.output.shape()[2];
            const T* px = in[0].data<T>().data();
            const T* pw = in[1].data<T>().data();
            din[0] = fresh(in[0]);
            din[1] = fresh(in[1]);
            din[2] = fresh(in[2]);
            T* pdx = TensorRW::mut<T>(din[0]);
            T* pdw = TensorRW::mut<T>(din[1]);
            T* pdb = TensorRW::mut<T>(din[2]);
            for (int64_t oc = 0; oc < co; ++oc) {
                double acc = 0;
                for (int64_t i = 0; i < ho * wo; ++i) acc += pg[oc * ho * wo + i];
                pdb[oc] = static_cast<T>(acc);
            }
            parallel_for(co, [&](int64_t lo, int64_t hi) {
                for (int64_t oc = lo; oc < hi; ++oc)
                    for (int64_t ic = 0; ic < ci; ++ic)
                        for (int64_t ky = 0; ky < kh; ++ky)
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                double acc = 0;
                                for (int64_t y = 0; y < ho; ++y) {
                                    const int64_t iy = y * s + ky - p;
                                    if (iy < 0 || iy >= h) continue;
                                    for (int64_t xx = 0; xx < wo; ++xx) {
                                        const int64_t ix = xx * s + kx - p;
                                        if (ix < 0 || ix >= wd) continue;
                                        acc += pg[(oc * ho + y) * wo + xx] * px[(ic * h + iy) * wd + ix];
                                    }
                                }
                                pdw[((oc * ci + ic) * kh + ky) * kw + kx] = static_cast<T>(acc);
                            }
            });
            parallel_for(ci, [&](int64_t lo, int64_t hi) {
                for (int64_t ic = lo; ic < hi; ++ic)
                    for (int64_t iy = 0; iy < h; ++iy)
                        for (int64_t ix = 0; ix < wd; ++ix) {
                            double acc = 0;
                            for (int64_t oc = 0; oc < co; ++oc)
                                for (int64_t ky = 0; ky < kh; ++ky) {
                                    const int64_t ny = iy + p - ky;
                                    if (ny % s != 0) continue;
                                    const int64_t y = ny / s;
                                    if (y < 0 || y >= ho) continue;
                                    for (int64_t kx = 0; kx < kw; ++kx) {
                                        const int64_t nx = ix + p - kx;
                                        if (nx % s != 0) continue;
                                        const int64_t xx = nx / s;
                                        if (xx < 0 || xx >= wo) continue;
                                        acc += pg[(oc * ho + y) * wo + xx] *
                                               pw[((oc * ci + ic) * kh + ky) * kw + kx];
                                    }
                                }
                            pdx[(ic * h + iy) * wd + ix] = static_cast<T>(acc);
                        }
            });
            break;
        }
        case OpKind::kConvTranspose2d: {
            const int64_t ci = in[0].shape()[0], hi_ = in[0].shape()[1], wi = in[0].shape()[2];
            const int64_t co = in[1].shape()[1], kh = in[1].shape()[2], kw = in[1].shape()[3];
            const int64_t s = node.attrs.get_int("stride", 1), p = node.attrs.get_int("pad", 1);
            const int64_t ho = node.output.shape()[1], wo = node.output.shape()[2];
            const T* px = in[0].data<T>().data();
            const T* pw = in[1].data<T>().data();
            din[0] = fresh(in[0]);
            din[1] = fresh(in[1]);
            din[2] = fresh(in[2]);
            T* pdx = TensorRW::mut<T>(din[0]);
            T* pdw = TensorRW::mut<T>(din[1]);
            T* pdb = TensorRW::mut<T>(din[2]);
            for (int64_t oc = 0; oc < co; ++oc) {
                double acc = 0;
                for (int64_t i = 0; i < ho * wo; ++i) acc += pg[oc * ho * wo + i];
                pdb[oc] = static_cast<T>(acc);
            }
            // dx[ci,iy,ix] = sum_{co,ky,kx} g[co, iy*s-p+ky, ix*s-p+kx] w[ci,co,ky,kx]
            parallel_for(ci, [&](int64_t lo, int64_t hi) {
                for (int64_t ic = lo; ic < hi; ++ic)
                    for (int64_t iy = 0; iy < hi_; ++iy)
                        for (int64_t ix = 0; ix < wi; ++ix) {
                            double acc = 0;
                            for (int64_t oc = 0; oc < co; ++oc)
                                for (int64_t ky = 0; ky < kh; ++ky) {
                                    const int64_t oy = iy * s - p + ky;
                                    if (oy < 0 || oy >= ho) continue;
                                    for (int64_t kx = 0; kx < kw; ++kx) {
                                        const int64_t ox = ix * s - p + kx;
                                        if (ox < 0 || ox >= wo) continue;
                                        acc += pg[(oc * ho + oy) * wo + ox] *
                                               pw[((ic * co + oc) * kh + ky) * kw + kx];
                                    }
                                }
                            pdx[(ic * hi_ + iy) * wi + ix] = static_cast<T>(acc);
                        }
            });
            parallel_for(ci, [&](int64_t lo, int64_t hi) {
                for (int64_t ic = lo; ic < hi; ++ic)
                    for (int64_t oc = 0; oc < co; ++oc)
                        for (int64_t ky = 0; ky < kh; ++ky)
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                double acc = 0;
                                for (int64_t iy = 0; iy < hi_; ++iy) {
                                    const int64_t oy = iy * s - p + ky;
                                    if (oy < 0 || oy >= ho) continue;
                                    for (int64_t ix = 0; ix < wi; ++ix) {
                                        const int64_t ox = ix * s - p + kx;
                                        if (ox < 0 || ox >= wo) continue;
                                        acc += px[(ic * hi_ + iy) * wi + ix] * pg[(oc * ho + oy) * wo + ox];
                                    }
                                }
                                pdw[((ic * co + oc) * kh + ky) * kw + kx] = static_cast<T>(acc);
                            }
            });
            break;
        }
        case OpKind::kLstm: {
            LstmDims d{in[0].shape()[0], in[0].shape()[1], in[0].shape()[2], node.attrs.get_int("hidden"),
                       node.attrs.get_bool("reverse", false)};
            din[0] = fresh(in[0]);
            din[1] = fresh(in[1]);
            din[2] = fresh(in[2]);
            din[3] = fresh(in[3]);
            k_lstm_backward<T>(in[0].data<T>().data(), in[1].data<T>().data(), in[2].data<T>().data(),
                               node.output.data<T>().data(), node.saved[0].data<T>().data(),
                               node.saved[1].data<T>().data(), pg, TensorRW::mut<T>(din[0]),
                               TensorRW::mut<T>(din[1]), TensorRW::mut<T>(din[2]), TensorRW::mut<T>(din[3]), d);
            break;
        }
        case OpKind::kIstft: {
            IstftDims d{node.attrs.get_int("n_fft"), node.attrs.get_int("hop"), in[0].shape()[1],
                        in[0].shape()[2], node.attrs.get_int("out_len")};
            din[0] = fresh(in[0]);
            T* base = TensorRW::mut<T>(din[0]);
            k_istft_backward<T>(pg, base, base + d.T * d.F, d);
            break;
        }
        case OpKind::kConcat: {
            const int64_t axis = node.attrs.get_int("axis");
            const auto st = strides_of(node.output.shape());
            const int64_t inner = st[axis];
            const int64_t total = node.output.shape()[axis];
            const int64_t outer = node.output.numel() / (inner * total);
            int64_t off = 0;
            for (size_t i = 0; i < in.size(); ++i) {
                const int64_t len = in[i].shape()[axis];
                din[i] = fresh(in[i]);
                T* pd = TensorRW::mut<T>(din[i]);
                for (int64_t r = 0; r < outer; ++r)
                    std::memcpy(pd + r * len * inner, pg + (r * total + off) * inner, sizeof(T) * len * inner);
                off += len;
            }
            break;
        }
        case OpKind::kPermute: {
            const auto& axes = node.attrs.get_ints("axes");
            std::vector<int64_t> inv(axes.size());
            for (size_t a = 0; a < axes.size(); ++a) inv[axes[a]] = static_cast<int64_t>(a);
            din[0] = fresh(in[0]);
            k_permute<T>(g, inv, din[0]);
            break;
        }
        case OpKind::kReshape: {
            din[0] = fresh(in[0]);
            std::memcpy(TensorRW::mut<T>(din[0]), pg, sizeof(T) * g.numel());
            break;
        }
        case OpKind::kSlice: {
            const int64_t axis = node.attrs.get_int("axis");
            const int64_t start = node.attrs.get_int("start");
            const auto st = strides_of(in[0].shape());
            const int64_t inner = st[axis];
            const int64_t len = node.output.shape()[axis];
            const int64_t total = in[0].shape()[axis];
            const int64_t outer = in[0].numel() / (inner * total);
            din[0] = Tensor::zeros(in[0].shape(), in[0].dtype());
            T* pd = TensorRW::mut<T>(din[0]);
            for (int64_t r = 0; r < outer; ++r)
                std::memcpy(pd + (r * total + start) * inner, pg + r * len * inner, sizeof(T) * len * inner);
            break;
        }
    }
}

}  // namespace

bool Gradients::has(const Tensor& t) const { return m_.count(t.id()) > 0; }

Tensor Gradients::get(const Tensor& t) const {
    auto it = m_.find(t.id());
    if (it == m_.end()) return Tensor::zeros(t.shape(), t.dtype());
    return it->second;
}

void Gradients::accumulate(const Tensor& key, const Tensor& g) {
    auto it = m_.find(key.id());
    if (it == m_.end())
        m_.emplace(key.id(), g);
    else
        it->second = grad_add(it->second, g);
}

Gradients backward(const Tape& tape, const Tensor& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
    if (!tape.produced(loss.id()))
        throw std::invalid_argument("backward: loss was not produced under this tape");
    Gradients grads;
    grads.accumulate(loss, Tensor::full(loss.shape(), 1.0, loss.dtype()));
    const auto& nodes = tape.nodes();
    for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
        const TapeNode& node = *it;
        if (!grads.has(node.output)) continue;
        Tensor g = grads.get(node.output);
        std::vector<Tensor> din(node.inputs.size());
        if (g.dtype() == Dtype::kF32)
            op_backward_typed<float>(node, g, din);
        else
            op_backward_typed<double>(node, g, din);
        for (size_t i = 0; i < node.inputs.size(); ++i)
            if (din[i].defined()) grads.accumulate(node.inputs[i], din[i]);
    }
    return grads;
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

double finite_diff_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         const std::vector<Tensor>& params, double eps, int64_t max_entries_per_tensor) {
    for (const auto& p : params)
        if (p.dtype() != Dtype::kF64)
            throw std::invalid_argument("finite_diff_check requires double precision parameters");
    Tape tape;
    Tensor loss;
    {
        TapeScope scope(tape);
        loss = f(params);
    }
    if (loss.numel() != 1) throw std::invalid_argument("finite_diff_check: f must return a scalar");
    Gradients grads = backward(tape, loss);

    double max_rel = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        const Tensor& p = params[pi];
        Tensor analytic = grads.get(p);
        std::vector<int64_t> entries;
        const int64_t n = p.numel();
        if (max_entries_per_tensor <= 0 || max_entries_per_tensor >= n) {
            entries.resize(n);
            for (int64_t i = 0; i < n; ++i) entries[i] = i;
        } else {
            Rng rng(Rng::derive_seed(0xf1d1ff, pi));
            for (int64_t i = 0; i < max_entries_per_tensor; ++i) entries.push_back(rng.uniform_int(0, n - 1));
        }
        for (int64_t e : entries) {
            const double x0 = p.at(e);
            auto eval_at = [&](double v) {
                std::vector<Tensor> mod = params;
                mod[pi] = p.with_entry(e, v);
                Tensor y = f(mod);
                return y.item();
            };
            const double fp = eval_at(x0 + eps);
            const double fm = eval_at(x0 - eps);
            const double numeric = (fp - fm) / (2.0 * eps);
            const double analytic_v = analytic.at(e);
            if (!std::isfinite(numeric) || !std::isfinite(analytic_v))
                throw std::runtime_error("finite_diff_check: non-finite value at parameter " +
                                         std::to_string(pi) + " entry " + std::to_string(e));
            const double denom = std::max({std::abs(analytic_v), std::abs(numeric), 1e-12});
            max_rel = std::max(max_rel, std::abs(analytic_v - numeric) / denom);
        }
    }
    return max_rel;
}

}  // namespace ftsep
