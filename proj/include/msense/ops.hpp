#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "msense/error.hpp"
#include "msense/tape.hpp"
#include "msense/tensor.hpp"

namespace msense::nn {

using Rng = std::mt19937_64;

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* what) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                             shape_str(t.shape()));
    }
}

}  // namespace detail

/// y = x·w + b for x[batch×in], w[in×out], b[out].
inline Var dense(Var x, Var w, Var b) {
    const Tensor& xv = x.value();
    const Tensor& wv = w.value();
    const Tensor& bv = b.value();
    detail::require_rank(xv, 2, "dense input");
    detail::require_rank(wv, 2, "dense weight");
    detail::require_rank(bv, 1, "dense bias");
    const std::size_t batch = xv.dim(0), in = xv.dim(1), out = wv.dim(1);
    if (wv.dim(0) != in || bv.dim(0) != out) {
        throw DimensionError("dense: input " + shape_str(xv.shape()) + " weight " + shape_str(wv.shape()) +
                             " bias " + shape_str(bv.shape()));
    }
    Tensor y({batch, out});
    for (std::size_t i = 0; i < batch; ++i) {
        double* yr = y.data() + i * out;
        std::copy(bv.data(), bv.data() + out, yr);
        const double* xr = xv.data() + i * in;
        for (std::size_t k = 0; k < in; ++k) {
            const double xk = xr[k];
            const double* wr = wv.data() + k * out;
            for (std::size_t j = 0; j < out; ++j) yr[j] += xk * wr[j];
        }
    }
    return x.tape->record(std::move(y), {x, w, b}, [x, w, b, batch, in, out](Tape& t, std::size_t id) {
        const Tensor& dy = t.grad(id);
        const Tensor& xv = t.value(x.id);
        const Tensor& wv = t.value(w.id);
        if (Tensor* dx = t.accumulate(x)) {
            for (std::size_t i = 0; i < batch; ++i) {
                const double* dyr = dy.data() + i * out;
                double* dxr = dx->data() + i * in;
                for (std::size_t k = 0; k < in; ++k) {
                    const double* wr = wv.data() + k * out;
                    double s = 0.0;
                    for (std::size_t j = 0; j < out; ++j) s += dyr[j] * wr[j];
                    dxr[k] += s;
                }
            }
        }
        if (Tensor* dw = t.accumulate(w)) {
            for (std::size_t i = 0; i < batch; ++i) {
                const double* dyr = dy.data() + i * out;
                const double* xr = xv.data() + i * in;
                for (std::size_t k = 0; k < in; ++k) {
                    const double xk = xr[k];
                    double* dwr = dw->data() + k * out;
                    for (std::size_t j = 0; j < out; ++j) dwr[j] += xk * dyr[j];
                }
            }
        }
        if (Tensor* db = t.accumulate(b)) {
            for (std::size_t i = 0; i < batch; ++i) {
                for (std::size_t j = 0; j < out; ++j) (*db)[j] += dy[i * out + j];
            }
        }
    });
}

/// Valid-padding 1D convolution: x[batch×T×D], kernels[k×D×C], b[C] →
/// y[batch×(T−k+1)×C].
inline Var conv1d(Var x, Var kernels, Var b) {
    const Tensor& xv = x.value();
    const Tensor& kv = kernels.value();
    const Tensor& bv = b.value();
    detail::require_rank(xv, 3, "conv1d input");
    detail::require_rank(kv, 3, "conv1d kernels");
    detail::require_rank(bv, 1, "conv1d bias");
    const std::size_t batch = xv.dim(0), steps = xv.dim(1), in = xv.dim(2);
    const std::size_t width = kv.dim(0), out = kv.dim(2);
    if (kv.dim(1) != in || bv.dim(0) != out) {
        throw DimensionError("conv1d: input " + shape_str(xv.shape()) + " kernels " + shape_str(kv.shape()) +
                             " bias " + shape_str(bv.shape()));
    }
    if (steps < width) {
        throw SequenceTooShortError("conv1d: sequence length " + std::to_string(steps) + " shorter than kernel width " +
                                    std::to_string(width));
    }
    const std::size_t out_steps = steps - width + 1;
    Tensor y({batch, out_steps, out});
    for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t t = 0; t < out_steps; ++t) {
            double* yr = y.data() + (n * out_steps + t) * out;
            std::copy(bv.data(), bv.data() + out, yr);
            for (std::size_t j = 0; j < width; ++j) {
                const double* xr = xv.data() + (n * steps + t + j) * in;
                const double* kj = kv.data() + j * in * out;
                for (std::size_t d = 0; d < in; ++d) {
                    const double xd = xr[d];
                    const double* kr = kj + d * out;
                    for (std::size_t c = 0; c < out; ++c) yr[c] += xd * kr[c];
                }
            }
        }
    }
    return x.tape->record(
        std::move(y), {x, kernels, b},
        [x, kernels, b, batch, steps, in, width, out, out_steps](Tape& t, std::size_t id) {
            const Tensor& dy = t.grad(id);
            const Tensor& xv = t.value(x.id);
            const Tensor& kv = t.value(kernels.id);
            Tensor* dx = t.accumulate(x);
            Tensor* dk = t.accumulate(kernels);
            Tensor* db = t.accumulate(b);
            for (std::size_t n = 0; n < batch; ++n) {
                for (std::size_t s = 0; s < out_steps; ++s) {
                    const double* dyr = dy.data() + (n * out_steps + s) * out;
                    if (db) {
                        for (std::size_t c = 0; c < out; ++c) (*db)[c] += dyr[c];
                    }
                    for (std::size_t j = 0; j < width; ++j) {
                        const std::size_t xoff = (n * steps + s + j) * in;
                        for (std::size_t d = 0; d < in; ++d) {
                            const std::size_t koff = (j * in + d) * out;
                            if (dx) {
                                double acc = 0.0;
                                for (std::size_t c = 0; c < out; ++c) acc += dyr[c] * kv[koff + c];
                                (*dx)[xoff + d] += acc;
                            }
                            if (dk) {
                                const double xd = xv[xoff + d];
                                double* dkr = dk->data() + koff;
                                for (std::size_t c = 0; c < out; ++c) dkr[c] += xd * dyr[c];
                            }
                        }
                    }
                }
            }
        });
}

inline Var relu(Var x) {
    const Tensor& xv = x.value();
    Tensor y(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    return x.tape->record(std::move(y), {x}, [x](Tape& t, std::size_t id) {
        const Tensor& dy = t.grad(id);
        const Tensor& xv = t.value(x.id);
        if (Tensor* dx = t.accumulate(x)) {
            for (std::size_t i = 0; i < xv.size(); ++i) {
                if (xv[i] > 0.0) (*dx)[i] += dy[i];
            }
        }
    });
}

/// Inverted dropout. Identity when not training or when rate is 0.
inline Var dropout(Var x, double rate, bool training, Rng& rng) {
    if (!(rate >= 0.0 && rate < 1.0)) {
        throw ParameterError("dropout rate must lie in [0,1), got " + std::to_string(rate));
    }
    if (!training || rate == 0.0) return x;
    const Tensor& xv = x.value();
    const double keep_scale = 1.0 / (1.0 - rate);
    std::bernoulli_distribution drop(rate);
    std::vector<double> scale(xv.size());
    Tensor y(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        scale[i] = drop(rng) ? 0.0 : keep_scale;
        y[i] = xv[i] * scale[i];
    }
    return x.tape->record(std::move(y), {x}, [x, scale = std::move(scale)](Tape& t, std::size_t id) {
        const Tensor& dy = t.grad(id);
        if (Tensor* dx = t.accumulate(x)) {
            for (std::size_t i = 0; i < scale.size(); ++i) (*dx)[i] += dy[i] * scale[i];
        }
    });
}

/// Per-row standardization followed by an affine gain/shift.
inline Var layernorm(Var x, Var gain, Var shift, double eps = 1e-5) {
    if (!(eps > 0.0)) throw ParameterError("layernorm eps must be positive");
    const Tensor& xv = x.value();
    detail::require_rank(xv, 2, "layernorm input");
    const std::size_t rows = xv.dim(0), cols = xv.dim(1);
    if (gain.value().shape() != Shape{cols} || shift.value().shape() != Shape{cols}) {
        throw DimensionError("layernorm: gain/shift must have shape [" + std::to_string(cols) + "]");
    }
    const Tensor& gv = gain.value();
    const Tensor& sv = shift.value();
    Tensor normed({rows, cols});
    std::vector<double> inv_std(rows);
    Tensor y({rows, cols});
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * cols;
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= static_cast<double>(cols);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            const double h = (xr[c] - mean) * inv_std[r];
            normed.at(r, c) = h;
            y.at(r, c) = gv[c] * h + sv[c];
        }
    }
    return x.tape->record(
        std::move(y), {x, gain, shift},
        [x, gain, shift, rows, cols, normed = std::move(normed), inv_std = std::move(inv_std)](Tape& t,
                                                                                               std::size_t id) {
            const Tensor& dy = t.grad(id);
            const Tensor& gv = t.value(gain.id);
            if (Tensor* dg = t.accumulate(gain)) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) (*dg)[c] += dy.at(r, c) * normed.at(r, c);
            }
            if (Tensor* ds = t.accumulate(shift)) {
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) (*ds)[c] += dy.at(r, c);
            }
            if (Tensor* dx = t.accumulate(x)) {
                const double n = static_cast<double>(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    double mean_dh = 0.0, mean_dh_h = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        const double dh = dy.at(r, c) * gv[c];
                        mean_dh += dh;
                        mean_dh_h += dh * normed.at(r, c);
                    }
                    mean_dh /= n;
                    mean_dh_h /= n;
                    for (std::size_t c = 0; c < cols; ++c) {
                        const double dh = dy.at(r, c) * gv[c];
                        dx->at(r, c) += inv_std[r] * (dh - mean_dh - normed.at(r, c) * mean_dh_h);
                    }
                }
            }
        });
}

/// Global average pool over the time axis: x[batch×T×C] → [batch×C].
inline Var mean_over_time(Var x) {
    const Tensor& xv = x.value();
    detail::require_rank(xv, 3, "mean_over_time input");
    const std::size_t batch = xv.dim(0), steps = xv.dim(1), ch = xv.dim(2);
    Tensor y({batch, ch});
    const double inv = 1.0 / static_cast<double>(steps);
    for (std::size_t n = 0; n < batch; ++n)
        for (std::size_t s = 0; s < steps; ++s)
            for (std::size_t c = 0; c < ch; ++c) y.at(n, c) += xv.at(n, s, c) * inv;
    return x.tape->record(std::move(y), {x}, [x, batch, steps, ch, inv](Tape& t, std::size_t id) {
        const Tensor& dy = t.grad(id);
        if (Tensor* dx = t.accumulate(x)) {
            for (std::size_t n = 0; n < batch; ++n)
                for (std::size_t s = 0; s < steps; ++s)
                    for (std::size_t c = 0; c < ch; ++c) dx->at(n, s, c) += dy.at(n, c) * inv;
        }
    });
}

/// Adds the vector r[d] to every row of x[batch×d].
inline Var add_row(Var x, Var r) {
    const Tensor& xv = x.value();
    detail::require_rank(xv, 2, "add_row input");
    const std::size_t rows = xv.dim(0), cols = xv.dim(1);
    if (r.value().shape() != Shape{cols}) throw DimensionError("add_row: row vector width mismatch");
    const Tensor& rv = r.value();
    Tensor y = xv;
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t c = 0; c < cols; ++c) y.at(i, c) += rv[c];
    return x.tape->record(std::move(y), {x, r}, [x, r, rows, cols](Tape& t, std::size_t id) {
        const Tensor& dy = t.grad(id);
        if (Tensor* dx = t.accumulate(x)) {
            for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i];
        }
        if (Tensor* dr = t.accumulate(r)) {
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t c = 0; c < cols; ++c) (*dr)[c] += dy.at(i, c);
        }
    });
}

/// Stacks r[d] into `rows` identical rows.
inline Var broadcast_rows(Var r, std::size_t rows) {
    const Tensor& rv = r.value();
    detail::require_rank(rv, 1, "broadcast_rows input");
    const std::size_t cols = rv.dim(0);
    Tensor y({rows, cols});
    for (std::size_t i = 0; i < rows; ++i) std::copy(rv.data(), rv.data() + cols, y.data() + i * cols);
    return r.tape->record(std::move(y), {r}, [r, rows, cols](Tape& t, std::size_t id) {
        const Tensor& dy = t.grad(id);
        if (Tensor* dr = t.accumulate(r)) {
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t c = 0; c < cols; ++c) (*dr)[c] += dy.at(i, c);
        }
    });
}

/// Concatenates [batch×d_i] matrices along the column axis.
inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no inputs");
    const std::size_t rows = parts.front().value().dim(0);
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_rank(p.value(), 2, "concat_cols input");
        if (p.value().dim(0) != rows) throw DimensionError("concat_cols: row count mismatch");
        widths.push_back(p.value().dim(1));
        total += widths.back();
    }
    Tensor y({rows, total});
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& v = parts[k].value();
        for (std::size_t i = 0; i < rows; ++i)
            std::copy(v.data() + i * widths[k], v.data() + (i + 1) * widths[k], y.data() + i * total + off);
        off += widths[k];
    }
    return parts.front().tape->record(std::move(y), parts, [parts, widths, rows, total](Tape& t, std::size_t id) {
        const Tensor& dy = t.grad(id);
        std::size_t off = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
            if (Tensor* dp = t.accumulate(parts[k])) {
                for (std::size_t i = 0; i < rows; ++i)
                    for (std::size_t c = 0; c < widths[k]; ++c) dp->at(i, c) += dy[i * total + off + c];
            }
            off += widths[k];
        }
    });
}

inline Var add(Var a, Var b) {
    if (a.value().shape() != b.value().shape()) throw DimensionError("add: shape mismatch");
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += b.value()[i];
    return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, std::size_t id) {
        const Tensor& dy = t.grad(id);
        for (Var v : {a, b}) {
            if (Tensor* d = t.accumulate(v)) {
                for (std::size_t i = 0; i < dy.size(); ++i) (*d)[i] += dy[i];
            }
        }
    });
}

inline Var scale(Var x, double factor) {
    Tensor y = x.value();
    for (auto& v : y.values()) v *= factor;
    return x.tape->record(std::move(y), {x}, [x, factor](Tape& t, std::size_t id) {
        const Tensor& dy = t.grad(id);
        if (Tensor* dx = t.accumulate(x)) {
            for (std::size_t i = 0; i < dy.size(); ++i) (*dx)[i] += dy[i] * factor;
        }
    });
}

/// Elementwise product of equally shaped tensors.
inline Var mul(Var a, Var b) {
    if (a.value().shape() != b.value().shape()) throw DimensionError("mul: shape mismatch");
    Tensor y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= b.value()[i];
    return a.tape->record(std::move(y), {a, b}, [a, b](Tape& t, std::size_t id) {
        const Tensor& dy = t.grad(id);
        const Tensor& av = t.value(a.id);
        const Tensor& bv = t.value(b.id);
        if (Tensor* da = t.accumulate(a)) {
            for (std::size_t i = 0; i < dy.size(); ++i) (*da)[i] += dy[i] * bv[i];
        }
        if (Tensor* db = t.accumulate(b)) {
            for (std::size_t i = 0; i < dy.size(); ++i) (*db)[i] += dy[i] * av[i];
        }
    });
}

inline Var sum_all(Var x) {
    const Tensor& xv = x.value();
    double s = 0.0;
    for (double v : xv.values()) s += v;
    return x.tape->record(Tensor({1}, {s}), {x}, [x](Tape& t, std::size_t id) {
        const double g = t.grad(id)[0];
        if (Tensor* dx = t.accumulate(x)) {
            for (auto& v : dx->values()) v += g;
        }
    });
}

/// Row-wise softmax without recording; used for inference outputs.
inline Tensor softmax_rows(const Tensor& logits) {
    detail::require_rank(logits, 2, "softmax input");
    const std::size_t rows = logits.dim(0), k = logits.dim(1);
    Tensor p({rows, k});
    for (std::size_t i = 0; i < rows; ++i) {
        double mx = logits.at(i, 0);
        for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits.at(i, c));
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            p.at(i, c) = std::exp(logits.at(i, c) - mx);
            z += p.at(i, c);
        }
        for (std::size_t c = 0; c < k; ++c) p.at(i, c) /= z;
    }
    return p;
}

/// Mean over the batch of −log softmax(logits)[target].
inline Var softmax_cross_entropy(Var logits, std::span<const std::size_t> targets) {
    const Tensor& lv = logits.value();
    detail::require_rank(lv, 2, "softmax_cross_entropy logits");
    const std::size_t rows = lv.dim(0), k = lv.dim(1);
    if (targets.size() != rows) throw DimensionError("softmax_cross_entropy: target count does not match batch");
    for (auto y : targets) {
        if (y >= k) throw LabelError("class label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    }
    Tensor probs = softmax_rows(lv);
    double loss = 0.0;
    for (std::size_t i = 0; i < rows; ++i) {
        double mx = lv.at(i, 0);
        for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, lv.at(i, c));
        double z = 0.0;
        for (std::size_t c = 0; c < k; ++c) z += std::exp(lv.at(i, c) - mx);
        loss += -(lv.at(i, targets[i]) - mx - std::log(z));
    }
    loss /= static_cast<double>(rows);
    std::vector<std::size_t> ys(targets.begin(), targets.end());
    return logits.tape->record(
        Tensor({1}, {loss}), {logits}, [logits, rows, k, probs = std::move(probs), ys = std::move(ys)](Tape& t,
                                                                                                   std::size_t id) {
            const double g = t.grad(id)[0] / static_cast<double>(rows);
            if (Tensor* dl = t.accumulate(logits)) {
                for (std::size_t i = 0; i < rows; ++i) {
                    for (std::size_t c = 0; c < k; ++c) {
                        dl->at(i, c) += g * (probs.at(i, c) - (c == ys[i] ? 1.0 : 0.0));
                    }
                }
            }
        });
}

/// Mean squared error; `pred` may be [batch] or [batch×1].
inline Var mse_loss(Var pred, std::span<const double> target) {
    const Tensor& pv = pred.value();
    if (pv.size() != target.size()) {
        throw DimensionError("mse_loss: prediction count " + std::to_string(pv.size()) + " vs target count " +
                             std::to_string(target.size()));
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) loss += (pv[i] - target[i]) * (pv[i] - target[i]);
    const double n = static_cast<double>(pv.size());
    loss /= n;
    std::vector<double> ys(target.begin(), target.end());
    return pred.tape->record(Tensor({1}, {loss}), {pred}, [pred, n, ys = std::move(ys)](Tape& t, std::size_t id) {
        const double g = t.grad(id)[0];
        const Tensor& pv = t.value(pred.id);
        if (Tensor* dp = t.accumulate(pred)) {
            for (std::size_t i = 0; i < ys.size(); ++i) (*dp)[i] += g * 2.0 * (pv[i] - ys[i]) / n;
        }
    });
}

}  // namespace msense::nn
