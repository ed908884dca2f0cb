#ifndef FTSEP_LOSSES_HPP
#define FTSEP_LOSSES_HPP

#include <utility>
#include <vector>

#include "ftsep/audio.hpp"
#include "ftsep/tensor.hpp"

namespace ftsep {

inline constexpr double kSdrEps = 1e-8;

enum class LossKind { kSiSdrPit, kSaSdr };

const char* loss_kind_name(LossKind kind);
LossKind loss_kind_from_name(const std::string& name);

struct PitResult {
    std::vector<int> permutation;     // estimate index -> reference index
    Tensor loss;                      // scalar, minimum over all assignments
    std::vector<double> per_pair_db;  // per estimate channel under the chosen permutation
};

/// Scale-invariant SDR in dB, differentiable. Both signals are mean-subtracted
/// before the projection. 1-D tensors of equal length; reference must not be
/// identically zero.
Tensor si_sdr(const Tensor& reference, const Tensor& estimate);
double si_sdr(const Waveform& reference, const Waveform& estimate);

/// Permutation invariant loss over all C! assignments. For the SI-SDR kind the
/// loss is -mean over channels of si_sdr(ref_perm(c), est_c). Gradients flow
/// through the winning permutation only.
PitResult pit_loss(const std::vector<Tensor>& references, const std::vector<Tensor>& estimates,
                   LossKind kind = LossKind::kSiSdrPit);

/// Source-aggregated SDR: one ratio of summed reference energy over summed
/// error energy, maximized over permutations. Not per-channel scale-invariant.
std::pair<Tensor, std::vector<int>> sa_sdr(const std::vector<Tensor>& references,
                                           const std::vector<Tensor>& estimates);

/// All permutations of {0..c-1} in lexicographic order.
std::vector<std::vector<int>> all_permutations(int c);

}  // namespace ftsep

#endif  // FTSEP_LOSSES_HPP
