#include "ftsep/losses.hpp"

#include <algorithm>
#include <cmath>

namespace ftsep {

namespace {
const double kTenOverLn10 = 10.0 / std::log(10.0);

void check_channels(const std::vector<Tensor>& refs, const std::vector<Tensor>& ests) {
    if (refs.size() < 2) throw std::invalid_argument("pit: need at least 2 channels");
    if (refs.size() != ests.size())
        throw std::invalid_argument("pit: " + std::to_string(refs.size()) + " references vs " +
                                    std::to_string(ests.size()) + " estimates");
    for (size_t c = 0; c < refs.size(); ++c)
        if (refs[c].shape() != ests[c].shape())
            throw std::invalid_argument("pit: channel " + std::to_string(c) + " length mismatch " +
                                        shape_str(refs[c].shape()) + " vs " + shape_str(ests[c].shape()));
}
}  // namespace

const char* loss_kind_name(LossKind kind) { return kind == LossKind::kSiSdrPit ? "si-sdr-pit" : "sa-sdr"; }

LossKind loss_kind_from_name(const std::string& name) {
    if (name == "si-sdr-pit") return LossKind::kSiSdrPit;
    if (name == "sa-sdr") return LossKind::kSaSdr;
    throw ConfigError("unknown loss kind '" + name + "' (want si-sdr-pit or sa-sdr)");
}

std::vector<std::vector<int>> all_permutations(int c) {
    std::vector<int> idx(c);
    for (int i = 0; i < c; ++i) idx[i] = i;
    std::vector<std::vector<int>> out;
    do {
        out.push_back(idx);
    } while (std::next_permutation(idx.begin(), idx.end()));
    return out;
}

Tensor si_sdr(const Tensor& reference, const Tensor& estimate) {
    if (reference.rank() != 1 || estimate.rank() != 1 || reference.shape() != estimate.shape())
        throw std::invalid_argument("si_sdr: length mismatch " + shape_str(reference.shape()) + " vs " +
                                    shape_str(estimate.shape()));
    double ref_energy = 0;
    for (int64_t i = 0; i < reference.numel(); ++i) ref_energy += reference.at(i) * reference.at(i);
    if (ref_energy == 0.0) throw std::invalid_argument("si_sdr: reference is identically zero");

    const Dtype dt = reference.dtype();
    Tensor eps = Tensor::scalar(kSdrEps, dt);
    Tensor ref_c = sub(reference, mean_all(reference));
    Tensor est_c = sub(estimate, mean_all(estimate));
    Tensor alpha = divide(sum_all(mul(est_c, ref_c)), add(sum_all(mul(ref_c, ref_c)), eps));
    Tensor target = mul(ref_c, alpha);
    Tensor err = sub(est_c, target);
    Tensor tt = sum_all(mul(target, target));
    Tensor ee = sum_all(mul(err, err));
    // The cap guard scales with the signal so the metric stays exactly
    // invariant to estimate gain and caps at +-80 dB.
    Tensor guard = mul(add(tt, ee), eps);
    Tensor ratio = divide(add(tt, guard), add(ee, guard));
    return mul(log_op(ratio), Tensor::scalar(kTenOverLn10, dt));
}

double si_sdr(const Waveform& reference, const Waveform& estimate) {
    Tensor r = Tensor::from_vector(reference.samples, {reference.length()}, Dtype::kF64);
    Tensor e = Tensor::from_vector(estimate.samples, {estimate.length()}, Dtype::kF64);
    return si_sdr(r, e).item();
}

PitResult pit_loss(const std::vector<Tensor>& references, const std::vector<Tensor>& estimates, LossKind kind) {
    check_channels(references, estimates);
    const int c = static_cast<int>(references.size());
    const Dtype dt = references[0].dtype();

    if (kind == LossKind::kSaSdr) {
        auto [best, perm] = sa_sdr(references, estimates);
        PitResult res;
        res.permutation = perm;
        res.loss = mul(best, Tensor::scalar(-1.0, dt));
        for (int e = 0; e < c; ++e) res.per_pair_db.push_back(si_sdr(references[perm[e]], estimates[e]).item());
        return res;
    }

    // pairwise scores once, then combine per assignment
    std::vector<std::vector<Tensor>> score(c, std::vector<Tensor>(c));
    for (int e = 0; e < c; ++e)
        for (int r = 0; r < c; ++r) score[e][r] = si_sdr(references[r], estimates[e]);

    const auto perms = all_permutations(c);
    int best = -1;
    double best_mean = 0;
    for (size_t p = 0; p < perms.size(); ++p) {
        double m = 0;
        for (int e = 0; e < c; ++e) m += score[e][perms[p][e]].item();
        m /= c;
        if (best < 0 || m > best_mean) {
            best = static_cast<int>(p);
            best_mean = m;
        }
    }
    PitResult res;
    res.permutation = perms[best];
    Tensor acc = score[0][res.permutation[0]];
    for (int e = 1; e < c; ++e) acc = add(acc, score[e][res.permutation[e]]);
    res.loss = mul(acc, Tensor::scalar(-1.0 / c, dt));
    for (int e = 0; e < c; ++e) res.per_pair_db.push_back(score[e][res.permutation[e]].item());
    return res;
}

std::pair<Tensor, std::vector<int>> sa_sdr(const std::vector<Tensor>& references,
                                           const std::vector<Tensor>& estimates) {
    check_channels(references, estimates);
    const int c = static_cast<int>(references.size());
    const Dtype dt = references[0].dtype();
    Tensor eps = Tensor::scalar(kSdrEps, dt);

    Tensor num = sum_all(mul(references[0], references[0]));
    for (int r = 1; r < c; ++r) num = add(num, sum_all(mul(references[r], references[r])));

    const auto perms = all_permutations(c);
    Tensor best_val;
    std::vector<int> best_perm;
    double best = 0;
    for (const auto& perm : perms) {
        Tensor den;
        for (int e = 0; e < c; ++e) {
            Tensor diff = sub(references[perm[e]], estimates[e]);
            Tensor d2 = sum_all(mul(diff, diff));
            den = e == 0 ? d2 : add(den, d2);
        }
        Tensor val = mul(log_op(divide(add(num, eps), add(den, eps))), Tensor::scalar(kTenOverLn10, dt));
        const double v = val.item();
        if (best_perm.empty() || v > best) {
            best = v;
            best_val = val;
            best_perm = perm;
        }
    }
    return {best_val, best_perm};
}

}  // namespace ftsep
