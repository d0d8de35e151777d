#pragma once

#include <vector>

#include "qtz/kernels/geometry.hpp"
#include "qtz/tensor.hpp"

namespace qtz {

// Reference float kernels, NHWC. These are the single source of float
// semantics: the graph executor and the trainer both call them, which is what
// makes the fold-equivalence checks bit-exact. Accumulation order is fixed
// (kh, kw, cin) and single threaded.

Tensor conv2d_fwd(const Tensor& x, const Tensor& w, const Tensor* bias, const Conv2DGeom& geom);
Tensor conv2d_bwd_input(const Tensor& gy, const Tensor& w, const std::vector<std::int64_t>& x_shape,
                        const Conv2DGeom& geom);
Tensor conv2d_bwd_weights(const Tensor& gy, const Tensor& x, const std::vector<std::int64_t>& w_shape,
                          const Conv2DGeom& geom);

// Depthwise weights are [Kh, Kw, C, M]; output channel index is c*M + m.
Tensor depthwise_fwd(const Tensor& x, const Tensor& w, const Tensor* bias, const Conv2DGeom& geom);
Tensor depthwise_bwd_input(const Tensor& gy, const Tensor& w,
                           const std::vector<std::int64_t>& x_shape, const Conv2DGeom& geom);
Tensor depthwise_bwd_weights(const Tensor& gy, const Tensor& x,
                             const std::vector<std::int64_t>& w_shape, const Conv2DGeom& geom);

// Fully connected: x is flattened to [N, F] row-major, w is [F, O].
Tensor fc_fwd(const Tensor& x, const Tensor& w, const Tensor* bias);
Tensor fc_bwd_input(const Tensor& gy, const Tensor& w, const std::vector<std::int64_t>& x_shape);
Tensor fc_bwd_weights(const Tensor& gy, const Tensor& x);

// Average over the elements actually inside the input (padding not counted).
Tensor avgpool_fwd(const Tensor& x, const PoolGeom& geom);
Tensor avgpool_bwd(const Tensor& gy, const std::vector<std::int64_t>& x_shape, const PoolGeom& geom);

Tensor relu_fwd(const Tensor& x);
Tensor relu_bwd(const Tensor& gy, const Tensor& x);
Tensor relu6_fwd(const Tensor& x);
Tensor relu6_bwd(const Tensor& gy, const Tensor& x);

Tensor add_fwd(const Tensor& a, const Tensor& b);
Tensor concat_fwd(const std::vector<const Tensor*>& inputs, int axis);
std::vector<Tensor> concat_bwd(const Tensor& gy, const std::vector<std::vector<std::int64_t>>& in_shapes,
                               int axis);

// Per-channel mean and biased variance over all non-channel dims (last axis
// is the channel axis).
void moments_per_channel(const Tensor& x, std::vector<double>& mean, std::vector<double>& var);

// gamma * (x - mean) / sigma + beta, channelwise along the last axis.
Tensor bn_apply(const Tensor& x, const std::vector<double>& gamma, const std::vector<double>& beta,
                const std::vector<double>& mean, const std::vector<double>& sigma);

// Backward of bn_apply where mean/sigma are the batch statistics of x.
// Returns gx and accumulates per-channel ggamma/gbeta.
Tensor bn_bwd_batch(const Tensor& gy, const Tensor& x, const std::vector<double>& gamma,
                    const std::vector<double>& mean, const std::vector<double>& sigma,
                    std::vector<double>& ggamma, std::vector<double>& gbeta);

// Backward of bn_apply with mean/sigma constant (frozen statistics).
Tensor bn_bwd_frozen(const Tensor& gy, const Tensor& x, const std::vector<double>& gamma,
                     const std::vector<double>& mean, const std::vector<double>& sigma,
                     std::vector<double>& ggamma, std::vector<double>& gbeta);

// Mean softmax cross-entropy over the batch; dlogits is d(loss)/d(logits).
double softmax_xent(const Tensor& logits, const std::vector<int>& labels, Tensor* dlogits);

// argmax per row of [N, K]
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace qtz
