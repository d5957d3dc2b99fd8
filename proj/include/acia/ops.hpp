#pragma once

#include <span>
#include <vector>

#include "acia/autograd.hpp"

// Differentiable tensor operations. Shapes are checked eagerly and reported
// through std::invalid_argument.
namespace acia::nn {

// elementwise, identical shapes
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, Scalar s);
Var add_scalar(const Var& x, Scalar s);
Var add_n(std::span<const Var> xs);

Var relu(const Var& x);
Var leaky_relu(const Var& x, Scalar slope);
Var gelu(const Var& x);  // exact erf form
Var sigmoid(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var pow(const Var& x, Scalar p);  // x >= 0 expected when p < 1

// reductions to a rank-0 scalar
Var sum(const Var& x);
Var mean(const Var& x);

// shape manipulation
Var reshape(const Var& x, Shape shape);
Var transpose(const Var& x);                     // [R,C] -> [C,R]
Var concat_cols(const Var& a, const Var& b);     // [R,A],[R,B] -> [R,A+B]
Var concat_rows(std::span<const Var> xs);        // stacks along dim 0, trailing dims equal
Var slice_cols(const Var& x, int start, int len);
Var select_rows(const Var& x, std::span<const int> rows);  // dim-0 gather, any rank
Var mean_rows(const Var& x);                     // [R,D] -> [1,D]

// linear algebra
Var matmul(const Var& a, const Var& b);                    // [M,K]x[K,N]
Var linear(const Var& x, const Var& weight, const Var& bias);  // x[R,in] W[out,in] b[out]

// convolutional, single image [C,H,W]
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
Var max_pool2d(const Var& x, int k);  // kernel = stride = k, ceil mode
Var spatial_to_rows(const Var& x);    // [C,H,W] -> [H*W, C]

// normalization / probabilities, row-wise on [R,C]
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Scalar eps = 1e-5);
Var layer_norm(const Var& x, Scalar eps = 1e-5);  // no affine
Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);
Var gather_cols(const Var& x, std::span<const int> cols);  // [R,C] -> [R], picks x[r, cols[r]]

// Gradient reversal: identity forward, upstream gradient times -lambda backward.
Var grad_reverse(const Var& x, Scalar lambda);

// Smooth-L1 per element of d (|d| < beta: 0.5 d^2 / beta, else |d| - 0.5 beta).
Var smooth_l1_elementwise(const Var& d, Scalar beta);

// Mean binary cross-entropy with logits against fixed 0/1 targets.
Var bce_with_logits(const Var& logits, std::span<const Scalar> targets);

}  // namespace acia::nn
