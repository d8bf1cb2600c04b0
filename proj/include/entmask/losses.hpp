#pragma once

#include <string>
#include <vector>

#include "entmask/autograd.hpp"
#include "entmask/errors.hpp"
#include "entmask/tensor.hpp"
#include "entmask/vocab.hpp"

namespace entmask {

namespace detail {

inline std::vector<uint8_t> selection_rows(int rows, const std::vector<int>& mask,
                                           const char* who) {
  std::vector<uint8_t> sel(static_cast<size_t>(rows), 0);
  for (int p : mask) {
    if (p < 0 || p >= rows) {
      throw ContractError(std::string(who) + ": masked position " + std::to_string(p) +
                          " outside the " + std::to_string(rows) + "-row logits");
    }
    sel[static_cast<size_t>(p)] = 1;
  }
  return sel;
}

}  // namespace detail

// Negative log-likelihood of the original tokens at the masked positions,
// averaged over them (or summed when sum_reduction is set). Rows outside the
// mask contribute nothing, forward or backward.
inline Tensor mlm_loss(Tape* tape, const Tensor& logits, const TokenSequence& original,
                       const std::vector<int>& mask, bool sum_reduction = false) {
  if (mask.empty()) throw ContractError("mlm_loss: empty mask");
  if (logits.rank() != 2 || logits.rows() != static_cast<int>(original.size())) {
    throw ShapeError("mlm_loss: logits " + shape_str(logits.dims()) + " do not cover " +
                     std::to_string(original.size()) + " tokens");
  }
  return masked_cross_entropy(tape, logits, original,
                              detail::selection_rows(logits.rows(), mask, "mlm_loss"),
                              !sum_reduction);
}

// Cross-entropy between the teacher's softmax (target) and the student's
// softmax at the masked positions. The teacher side is treated as a constant.
inline Tensor kd_loss(Tape* tape, const Tensor& student_logits, const Tensor& teacher_logits,
                      const std::vector<int>& mask, bool sum_reduction = false) {
  if (mask.empty()) throw ContractError("kd_loss: empty mask");
  if (student_logits.dims() != teacher_logits.dims()) {
    throw ContractError("kd_loss: student logits " + shape_str(student_logits.dims()) +
                        " and teacher logits " + shape_str(teacher_logits.dims()) + " disagree");
  }
  Tensor teacher_probs = softmax_rows(nullptr, teacher_logits);
  return soft_cross_entropy(tape, student_logits, teacher_probs,
                            detail::selection_rows(student_logits.rows(), mask, "kd_loss"),
                            !sum_reduction);
}

inline Tensor combined_loss(Tape* tape, const Tensor& mlm, const Tensor& kd, double w) {
  if (w < 0.0 || w > 1.0) throw ConfigError("kd_weight must lie in [0, 1]");
  return add(tape, scale(tape, mlm, 1.0 - w), scale(tape, kd, w));
}

inline double combined_total(double mlm, double kd, double w) {
  return (1.0 - w) * mlm + w * kd;
}

}  // namespace entmask
