#ifndef FTSEP_SELFCHECK_HPP
#define FTSEP_SELFCHECK_HPP

#include <string>
#include <vector>

#include "ftsep/trainer.hpp"

namespace ftsep {

struct CheckResult {
    std::string name;
    bool passed = false;
    std::string detail;
};

/// Fast cross-module property suite (reconstruction, metric invariants,
/// stitching identity, sampling ranges, optimizer behavior).
std::vector<CheckResult> run_selftest(uint64_t seed = 0);

struct GradCheckLine {
    std::string name;
    double max_rel_err = 0.0;
    double tolerance = 0.0;
    bool passed = false;
};

/// Finite-difference sweep over every primitive, the LSTM cell, one block,
/// and (optionally) a complete micro model. Double precision.
std::vector<GradCheckLine> run_gradcheck(bool include_full_model, uint64_t seed = 0);

/// Desk-scale two-speaker material with clearly separated voice registers.
/// target_s <= 0 keeps natural mixture lengths; otherwise each mixture is
/// trimmed/padded to exactly target_s seconds.
TrainData make_toy_dataset(int count, double target_s, int utt_min, int utt_max, uint64_t seed);

}  // namespace ftsep

#endif  // FTSEP_SELFCHECK_HPP
