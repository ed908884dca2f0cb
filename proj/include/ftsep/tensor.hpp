#ifndef FTSEP_TENSOR_HPP
#define FTSEP_TENSOR_HPP

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include "ftsep/common.hpp"

namespace ftsep {

enum class Dtype { kF32, kF64 };

const char* dtype_name(Dtype dt);

/// Dense row-major N-d value. Immutable once created; copies share storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> shape, Dtype dt);
    static Tensor full(std::vector<int64_t> shape, double value, Dtype dt);
    static Tensor scalar(double value, Dtype dt);
    static Tensor from_vector(const std::vector<double>& values, std::vector<int64_t> shape, Dtype dt);

    bool defined() const { return p_ != nullptr; }
    const std::vector<int64_t>& shape() const;
    int64_t rank() const { return static_cast<int64_t>(shape().size()); }
    int64_t numel() const;
    Dtype dtype() const;
    /// Unique id of the underlying storage; the key used by Tape and Gradients.
    uint64_t id() const;

    template <typename T>
    std::span<const T> data() const;

    double at(int64_t flat_index) const;
    /// Value of a one-element tensor.
    double item() const;
    std::vector<double> to_vector() const;

    Tensor cast(Dtype dt) const;
    /// Copy with one element replaced. Used by the finite-difference oracle.
    Tensor with_entry(int64_t flat_index, double value) const;

private:
    struct Payload;
    std::shared_ptr<Payload> p_;
    friend struct TensorRW;
};

std::string shape_str(const std::vector<int64_t>& shape);

/// Attribute map for primitive applications.
class Attrs {
public:
    using Value = std::variant<int64_t, double, bool, std::vector<int64_t>>;

    Attrs& set(const std::string& key, int64_t v);
    Attrs& set(const std::string& key, int v) { return set(key, static_cast<int64_t>(v)); }
    Attrs& set(const std::string& key, double v);
    Attrs& set(const std::string& key, bool v);
    Attrs& set(const std::string& key, std::vector<int64_t> v);

    bool has(const std::string& key) const;
    int64_t get_int(const std::string& key) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    double get_float(const std::string& key) const;
    double get_float(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    const std::vector<int64_t>& get_ints(const std::string& key) const;

private:
    std::map<std::string, Value> m_;
};

enum class OpKind {
    kMatmul,
    kAdd,
    kSub,
    kMul,
    kDiv,
    kSigmoid,
    kTanh,
    kLog,
    kSum,
    kMean,
    kLayerNorm,
    kConv2d,
    kConvTranspose2d,
    kLstm,
    kIstft,
    kConcat,
    kPermute,
    kReshape,
    kSlice,
};

const char* op_name(OpKind kind);
/// All primitive kinds, for gradient sweeps and diagnostics.
const std::vector<OpKind>& all_op_kinds();

struct TapeNode {
    OpKind kind;
    Attrs attrs;
    std::vector<Tensor> inputs;
    Tensor output;
    std::vector<Tensor> saved;  // op-specific state for backward
};

/// Reverse-mode recording of one forward pass. Rebuilt every step; owned by
/// exactly one thread while recording.
class Tape {
public:
    void clear();
    size_t size() const { return nodes_.size(); }
    const std::vector<TapeNode>& nodes() const { return nodes_; }
    bool produced(uint64_t tensor_id) const;

private:
    std::vector<TapeNode> nodes_;
    std::unordered_map<uint64_t, size_t> by_output_;
    friend Tensor apply_primitive(OpKind, const std::vector<Tensor>&, const Attrs&);
};

Tape* active_tape();

/// RAII: makes a tape the recording target for the current thread.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

/// RAII: suspends recording on the current thread.
class TapePause {
public:
    TapePause();
    ~TapePause();
    TapePause(const TapePause&) = delete;
    TapePause& operator=(const TapePause&) = delete;

private:
    Tape* prev_;
};

/// Validates shapes, runs the forward kernel, and records a node on the
/// active tape (if any).
Tensor apply_primitive(OpKind kind, const std::vector<Tensor>& inputs, const Attrs& attrs = Attrs());

// convenience wrappers
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor sigmoid(const Tensor& x);
Tensor tanh_op(const Tensor& x);
Tensor log_op(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride = 1, int64_t pad = 1);
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride = 1, int64_t pad = 1);
/// x: [S,B,Din]; returns hidden sequence [S,B,H]. reverse=true runs the
/// recurrence from the last step to the first, outputs kept at original
/// positions. Gate order in the 4H axis: input, forget, cell, output.
Tensor lstm(const Tensor& x, const Tensor& w_ih, const Tensor& w_hh, const Tensor& b, int64_t hidden,
            bool reverse);
/// x: [2,T,F] (real/imag planes); weighted overlap-add synthesis back to
/// out_len time samples with a periodic Hann window of n_fft.
Tensor istft_grid(const Tensor& x, int64_t n_fft, int64_t hop, int64_t out_len);
Tensor concat(const std::vector<Tensor>& xs, int64_t axis);
Tensor permute(const Tensor& x, std::vector<int64_t> axes);
Tensor reshape(const Tensor& x, std::vector<int64_t> shape);
Tensor slice(const Tensor& x, int64_t axis, int64_t start, int64_t len);

/// Gradient map keyed by tensor id. Leaves untouched by the loss read as
/// zeros of their own shape.
class Gradients {
public:
    bool has(const Tensor& t) const;
    Tensor get(const Tensor& t) const;
    void accumulate(const Tensor& key, const Tensor& g);
    size_t size() const { return m_.size(); }

private:
    std::unordered_map<uint64_t, Tensor> m_;
};

/// Reverse pass over the tape from a scalar loss produced under it.
Gradients backward(const Tape& tape, const Tensor& loss);

/// Central-difference gradient oracle. Runs f twice per checked entry and
/// compares against the tape gradient; returns the max relative error
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
/// Restricted to double precision. max_entries_per_tensor = 0 checks all
/// entries; otherwise a deterministic sample per tensor.
double finite_diff_check(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                         const std::vector<Tensor>& params, double eps = 1e-5,
                         int64_t max_entries_per_tensor = 0);

}  // namespace ftsep

#endif  // FTSEP_TENSOR_HPP
