// ops.hpp — differentiable operations on autodiff tensors.
//
// Covers exactly what the segmentation models need: elementwise arithmetic,
// ReLU/GELU, data movement (reshape, transpose, slice, concat, patchify),
// reductions, matmul/linear, softmax, layer/instance norm, 3D convolution,
// trilinear upsampling, and multi-head self-attention composed from the
// primitives. No broadcasting beyond scalar constants and row vectors.
//
// GELU uses the tanh form 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³))) with
// √(2/π) = 0.7978845608028654.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "liverformer/ad/tensor.hpp"

namespace liverformer::ad {

namespace detail {

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeMismatch(std::string(op) + ": shapes " + shape_str(a.shape()) +
                            " vs " + shape_str(b.shape()));
    }
}

template <typename T>
Tensor<T> make_result(Shape shape, const std::vector<Tensor<T>>& inputs,
                      const char* op_name) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value.assign(numel(n->shape), T{});
    n->name = op_name;
    for (const Tensor<T>& t : inputs) {
        n->inputs.push_back(t.node);
        n->requires_grad = n->requires_grad || t.node->requires_grad;
    }
    return Tensor<T>(std::move(n));
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    Tensor<T> out = detail::make_result<T>(a.shape(), {a, b}, "add");
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] + b.value()[i];
    Node<T>*on = out.node.get(), *an = a.node.get(), *bn = b.node.get();
    on->backward_fn = [on, an, bn, n] {
        if (an->requires_grad) {
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
        }
        if (bn->requires_grad) {
            for (std::size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i];
        }
    };
    return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor<T> out = detail::make_result<T>(a.shape(), {a, b}, "sub");
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] - b.value()[i];
    Node<T>*on = out.node.get(), *an = a.node.get(), *bn = b.node.get();
    on->backward_fn = [on, an, bn, n] {
        if (an->requires_grad) {
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
        }
        if (bn->requires_grad) {
            for (std::size_t i = 0; i < n; ++i) bn->grad[i] -= on->grad[i];
        }
    };
    return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor<T> out = detail::make_result<T>(a.shape(), {a, b}, "mul");
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] * b.value()[i];
    Node<T>*on = out.node.get(), *an = a.node.get(), *bn = b.node.get();
    on->backward_fn = [on, an, bn, n] {
        if (an->requires_grad) {
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] * bn->value[i];
        }
        if (bn->requires_grad) {
            for (std::size_t i = 0; i < n; ++i) bn->grad[i] += on->grad[i] * an->value[i];
        }
    };
    return out;
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "div");
    Tensor<T> out = detail::make_result<T>(a.shape(), {a, b}, "div");
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] / b.value()[i];
    Node<T>*on = out.node.get(), *an = a.node.get(), *bn = b.node.get();
    on->backward_fn = [on, an, bn, n] {
        if (an->requires_grad) {
            for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i] / bn->value[i];
        }
        if (bn->requires_grad) {
            for (std::size_t i = 0; i < n; ++i) {
                bn->grad[i] -= on->grad[i] * on->value[i] / bn->value[i];
            }
        }
    };
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out = detail::make_result<T>(a.shape(), {a}, "scale");
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.value()[i] = c * a.value()[i];
    Node<T>*on = out.node.get(), *an = a.node.get();
    on->backward_fn = [on, an, c, n] {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += c * on->grad[i];
    };
    return out;
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    Tensor<T> out = detail::make_result<T>(a.shape(), {a}, "add_scalar");
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) out.value()[i] = a.value()[i] + c;
    Node<T>*on = out.node.get(), *an = a.node.get();
    on->backward_fn = [on, an, n] {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
    };
    return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    Tensor<T> out = detail::make_result<T>(a.shape(), {a}, "relu");
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        out.value()[i] = a.value()[i] > T{} ? a.value()[i] : T{};
    }
    Node<T>*on = out.node.get(), *an = a.node.get();
    on->backward_fn = [on, an, n] {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < n; ++i) {
            if (an->value[i] > T{}) an->grad[i] += on->grad[i];
        }
    };
    return out;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T k1 = T(0.044715);
    Tensor<T> out = detail::make_result<T>(a.shape(), {a}, "gelu");
    const std::size_t n = out.numel();
    for (std::size_t i = 0; i < n; ++i) {
        const T x = a.value()[i];
        out.value()[i] = T(0.5) * x * (T(1) + std::tanh(k0 * (x + k1 * x * x * x)));
    }
    Node<T>*on = out.node.get(), *an = a.node.get();
    on->backward_fn = [on, an, n] {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < n; ++i) {
            const T x = an->value[i];
            const T t = std::tanh(k0 * (x + k1 * x * x * x));
            const T d = T(0.5) * (T(1) + t) +
                        T(0.5) * x * (T(1) - t * t) * k0 * (T(1) + T(3) * k1 * x * x);
            an->grad[i] += d * on->grad[i];
        }
    };
    return out;
}

// ------------------------------------------------------------- data movement

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    if (numel(new_shape) != a.numel()) {
        throw ShapeMismatch("reshape: " + shape_str(a.shape()) + " to " +
                            shape_str(new_shape) + " changes element count");
    }
    Tensor<T> out = detail::make_result<T>(std::move(new_shape), {a}, "reshape");
    out.value() = a.value();
    Node<T>*on = out.node.get(), *an = a.node.get();
    on->backward_fn = [on, an] {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i];
    };
    return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
    if (a.shape().size() != 2) {
        throw ShapeMismatch("transpose2d: need rank 2, got " + shape_str(a.shape()));
    }
    const std::size_t rows = a.shape()[0], cols = a.shape()[1];
    Tensor<T> out = detail::make_result<T>({cols, rows}, {a}, "transpose2d");
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out.value()[c * rows + r] = a.value()[r * cols + c];
        }
    }
    Node<T>*on = out.node.get(), *an = a.node.get();
    on->backward_fn = [on, an, rows, cols] {
        if (!an->requires_grad) return;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                an->grad[r * cols + c] += on->grad[c * rows + r];
            }
        }
    };
    return out;
}

template <typename T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t c0, std::size_t c1) {
    if (a.shape().size() != 2 || c0 >= c1 || c1 > a.shape()[1]) {
        throw ShapeMismatch("slice_cols: [" + std::to_string(c0) + ", " +
                            std::to_string(c1) + ") of " + shape_str(a.shape()));
    }
    const std::size_t rows = a.shape()[0], cols = a.shape()[1], width = c1 - c0;
    Tensor<T> out = detail::make_result<T>({rows, width}, {a}, "slice_cols");
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < width; ++c) {
            out.value()[r * width + c] = a.value()[r * cols + c0 + c];
        }
    }
    Node<T>*on = out.node.get(), *an = a.node.get();
    on->backward_fn = [on, an, rows, cols, width, c0] {
        if (!an->requires_grad) return;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < width; ++c) {
                an->grad[r * cols + c0 + c] += on->grad[r * width + c];
            }
        }
    };
    return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeMismatch("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) {
        throw ShapeMismatch("concat: axis " + std::to_string(axis) + " out of rank " +
                            std::to_string(first.size()));
    }
    Shape out_shape = first;
    for (std::size_t i = 1; i < parts.size(); ++i) {
        const Shape& s = parts[i].shape();
        if (s.size() != first.size()) {
            throw ShapeMismatch("concat: rank mismatch");
        }
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (d != axis && s[d] != first[d]) {
                throw ShapeMismatch("concat: shapes " + shape_str(first) + " vs " +
                                    shape_str(s) + " differ off-axis");
            }
        }
        out_shape[axis] += s[axis];
    }

    std::size_t outer = 1, inner = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
    for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];

    Tensor<T> out = detail::make_result<T>(out_shape, parts, "concat");
    const std::size_t out_row = out_shape[axis] * inner;
    std::size_t offset = 0;  // element offset of each part within an outer row
    std::vector<std::size_t> part_offsets, part_rows;
    for (const Tensor<T>& p : parts) {
        part_offsets.push_back(offset);
        part_rows.push_back(p.shape()[axis] * inner);
        offset += part_rows.back();
    }
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const std::vector<T>& src = parts[pi].value();
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy(src.begin() + static_cast<std::ptrdiff_t>(o * part_rows[pi]),
                      src.begin() + static_cast<std::ptrdiff_t>((o + 1) * part_rows[pi]),
                      out.value().begin() +
                          static_cast<std::ptrdiff_t>(o * out_row + part_offsets[pi]));
        }
    }
    Node<T>* on = out.node.get();
    on->backward_fn = [on, outer, out_row, part_offsets, part_rows] {
        for (std::size_t pi = 0; pi < on->inputs.size(); ++pi) {
            Node<T>* pn = on->inputs[pi].get();
            if (!pn->requires_grad) continue;
            for (std::size_t o = 0; o < outer; ++o) {
                const std::size_t src = o * out_row + part_offsets[pi];
                const std::size_t dst = o * part_rows[pi];
                for (std::size_t i = 0; i < part_rows[pi]; ++i) {
                    pn->grad[dst + i] += on->grad[src + i];
                }
            }
        }
    };
    return out;
}

/// [C, D, H, W] → [N, C·P³] tokens; token n enumerates patches in (pd, ph,
/// pw) row-major order, features ordered (c, local d, local h, local w).
template <typename T>
Tensor<T> patchify(const Tensor<T>& x, std::size_t p) {
    if (x.shape().size() != 4) {
        throw ShapeMismatch("patchify: need [C, D, H, W], got " + shape_str(x.shape()));
    }
    const std::size_t C = x.shape()[0], D = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (p == 0 || D % p || H % p || W % p) {
        throw NotDivisibleByPatch("patchify: dims " + shape_str(x.shape()) +
                                  " not divisible by patch size " + std::to_string(p));
    }
    const std::size_t nd = D / p, nh = H / p, nw = W / p;
    const std::size_t tokens = nd * nh * nw, width = C * p * p * p;
    Tensor<T> out = detail::make_result<T>({tokens, width}, {x}, "patchify");

    auto src_index = [C, D, H, W](std::size_t c, std::size_t d, std::size_t h, std::size_t w) {
        return ((c * D + d) * H + h) * W + w;
    };
    std::size_t t = 0;
    for (std::size_t pd = 0; pd < nd; ++pd) {
        for (std::size_t ph = 0; ph < nh; ++ph) {
            for (std::size_t pw = 0; pw < nw; ++pw, ++t) {
                std::size_t f = 0;
                for (std::size_t c = 0; c < C; ++c) {
                    for (std::size_t ld = 0; ld < p; ++ld) {
                        for (std::size_t lh = 0; lh < p; ++lh) {
                            for (std::size_t lw = 0; lw < p; ++lw, ++f) {
                                out.value()[t * width + f] = x.value()[src_index(
                                    c, pd * p + ld, ph * p + lh, pw * p + lw)];
                            }
                        }
                    }
                }
            }
        }
    }
    Node<T>*on = out.node.get(), *xn = x.node.get();
    on->backward_fn = [on, xn, C, D, H, W, p, nd, nh, nw, width, src_index] {
        if (!xn->requires_grad) return;
        std::size_t t = 0;
        for (std::size_t pd = 0; pd < nd; ++pd) {
            for (std::size_t ph = 0; ph < nh; ++ph) {
                for (std::size_t pw = 0; pw < nw; ++pw, ++t) {
                    std::size_t f = 0;
                    for (std::size_t c = 0; c < C; ++c) {
                        for (std::size_t ld = 0; ld < p; ++ld) {
                            for (std::size_t lh = 0; lh < p; ++lh) {
                                for (std::size_t lw = 0; lw < p; ++lw, ++f) {
                                    xn->grad[src_index(c, pd * p + ld, ph * p + lh,
                                                       pw * p + lw)] +=
                                        on->grad[t * width + f];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    return out;
}

/// Inverse of patchify: [N, C·P³] tokens back to [C, D, H, W].
template <typename T>
Tensor<T> unpatchify(const Tensor<T>& t, Shape grid_shape, std::size_t p) {
    if (t.shape().size() != 2 || grid_shape.size() != 4) {
        throw ShapeMismatch("unpatchify: need [N, width] tokens and [C, D, H, W] target");
    }
    const std::size_t C = grid_shape[0], D = grid_shape[1], H = grid_shape[2],
                      W = grid_shape[3];
    if (p == 0 || D % p || H % p || W % p) {
        throw NotDivisibleByPatch("unpatchify: target " + shape_str(grid_shape) +
                                  " not divisible by patch size " + std::to_string(p));
    }
    const std::size_t nd = D / p, nh = H / p, nw = W / p;
    const std::size_t tokens = nd * nh * nw, width = C * p * p * p;
    if (t.shape()[0] != tokens || t.shape()[1] != width) {
        throw ShapeMismatch("unpatchify: tokens " + shape_str(t.shape()) +
                            " incompatible with target " + shape_str(grid_shape));
    }
    Tensor<T> out = detail::make_result<T>(grid_shape, {t}, "unpatchify");
    auto dst_index = [C, D, H, W](std::size_t c, std::size_t d, std::size_t h, std::size_t w) {
        return ((c * D + d) * H + h) * W + w;
    };
    std::size_t ti = 0;
    for (std::size_t pd = 0; pd < nd; ++pd) {
        for (std::size_t ph = 0; ph < nh; ++ph) {
            for (std::size_t pw = 0; pw < nw; ++pw, ++ti) {
                std::size_t f = 0;
                for (std::size_t c = 0; c < C; ++c) {
                    for (std::size_t ld = 0; ld < p; ++ld) {
                        for (std::size_t lh = 0; lh < p; ++lh) {
                            for (std::size_t lw = 0; lw < p; ++lw, ++f) {
                                out.value()[dst_index(c, pd * p + ld, ph * p + lh,
                                                      pw * p + lw)] =
                                    t.value()[ti * width + f];
                            }
                        }
                    }
                }
            }
        }
    }
    Node<T>*on = out.node.get(), *tn = t.node.get();
    on->backward_fn = [on, tn, C, p, nd, nh, nw, width, dst_index] {
        if (!tn->requires_grad) return;
        std::size_t ti = 0;
        for (std::size_t pd = 0; pd < nd; ++pd) {
            for (std::size_t ph = 0; ph < nh; ++ph) {
                for (std::size_t pw = 0; pw < nw; ++pw, ++ti) {
                    std::size_t f = 0;
                    for (std::size_t c = 0; c < C; ++c) {
                        for (std::size_t ld = 0; ld < p; ++ld) {
                            for (std::size_t lh = 0; lh < p; ++lh) {
                                for (std::size_t lw = 0; lw < p; ++lw, ++f) {
                                    tn->grad[ti * width + f] +=
                                        on->grad[dst_index(c, pd * p + ld, ph * p + lh,
                                                           pw * p + lw)];
                                }
                            }
                        }
                    }
                }
            }
        }
    };
    return out;
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    Tensor<T> out = detail::make_result<T>({1}, {a}, "sum");
    T s{};
    for (T v : a.value()) s += v;
    out.value()[0] = s;
    Node<T>*on = out.node.get(), *an = a.node.get();
    on->backward_fn = [on, an] {
        if (!an->requires_grad) return;
        const T g = on->grad[0];
        for (T& v : an->grad) v += g;
    };
    return out;
}

/// [N, M] → [M], summing over rows.
template <typename T>
Tensor<T> colsum(const Tensor<T>& a) {
    if (a.shape().size() != 2) {
        throw ShapeMismatch("colsum: need rank 2, got " + shape_str(a.shape()));
    }
    const std::size_t rows = a.shape()[0], cols = a.shape()[1];
    Tensor<T> out = detail::make_result<T>({cols}, {a}, "colsum");
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) out.value()[c] += a.value()[r * cols + c];
    }
    Node<T>*on = out.node.get(), *an = a.node.get();
    on->backward_fn = [on, an, rows, cols] {
        if (!an->requires_grad) return;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < cols; ++c) an->grad[r * cols + c] += on->grad[c];
        }
    };
    return out;
}

// ------------------------------------------------------------ linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
        throw ShapeMismatch("matmul: " + shape_str(a.shape()) + " x " +
                            shape_str(b.shape()));
    }
    const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
    Tensor<T> out = detail::make_result<T>({n, m}, {a, b}, "matmul");
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const T av = a.value()[i * k + kk];
            if (av == T{}) continue;
            const T* brow = b.value().data() + kk * m;
            T* orow = out.value().data() + i * m;
            for (std::size_t j = 0; j < m; ++j) orow[j] += av * brow[j];
        }
    }
    Node<T>*on = out.node.get(), *an = a.node.get(), *bn = b.node.get();
    on->backward_fn = [on, an, bn, n, k, m] {
        if (an->requires_grad) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t kk = 0; kk < k; ++kk) {
                    T s{};
                    const T* brow = bn->value.data() + kk * m;
                    const T* grow = on->grad.data() + i * m;
                    for (std::size_t j = 0; j < m; ++j) s += grow[j] * brow[j];
                    an->grad[i * k + kk] += s;
                }
            }
        }
        if (bn->requires_grad) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t kk = 0; kk < k; ++kk) {
                    const T av = an->value[i * k + kk];
                    if (av == T{}) continue;
                    T* brow = bn->grad.data() + kk * m;
                    const T* grow = on->grad.data() + i * m;
                    for (std::size_t j = 0; j < m; ++j) brow[j] += av * grow[j];
                }
            }
        }
    };
    return out;
}

/// x: [N, M] plus v: [M] added to every row.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
    if (x.shape().size() != 2 || v.shape().size() != 1 || v.shape()[0] != x.shape()[1]) {
        throw ShapeMismatch("add_rowvec: " + shape_str(x.shape()) + " + " +
                            shape_str(v.shape()));
    }
    const std::size_t rows = x.shape()[0], cols = x.shape()[1];
    Tensor<T> out = detail::make_result<T>(x.shape(), {x, v}, "add_rowvec");
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out.value()[r * cols + c] = x.value()[r * cols + c] + v.value()[c];
        }
    }
    Node<T>*on = out.node.get(), *xn = x.node.get(), *vn = v.node.get();
    on->backward_fn = [on, xn, vn, rows, cols] {
        if (xn->requires_grad) {
            for (std::size_t i = 0; i < rows * cols; ++i) xn->grad[i] += on->grad[i];
        }
        if (vn->requires_grad) {
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) vn->grad[c] += on->grad[r * cols + c];
            }
        }
    };
    return out;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w) {
    return matmul(x, w);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_rowvec(matmul(x, w), b);
}

// ------------------------------------------------------------------ softmax

/// Softmax along the last axis, max-shifted for stability.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
    if (a.shape().empty()) throw ShapeMismatch("softmax: need rank >= 1");
    const std::size_t cols = a.shape().back();
    const std::size_t rows = a.numel() / cols;
    Tensor<T> out = detail::make_result<T>(a.shape(), {a}, "softmax");
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = a.value().data() + r * cols;
        T* o = out.value().data() + r * cols;
        T mx = in[0];
        for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
        T denom{};
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            denom += o[c];
        }
        for (std::size_t c = 0; c < cols; ++c) o[c] /= denom;
    }
    Node<T>*on = out.node.get(), *an = a.node.get();
    on->backward_fn = [on, an, rows, cols] {
        if (!an->requires_grad) return;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* y = on->value.data() + r * cols;
            const T* dy = on->grad.data() + r * cols;
            T dot{};
            for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
            for (std::size_t c = 0; c < cols; ++c) {
                an->grad[r * cols + c] += y[c] * (dy[c] - dot);
            }
        }
    };
    return out;
}

// ----------------------------------------------------------- normalizations

/// x: [N, d]; per-row standardization, then out = γ·x̂ + β with γ, β: [d].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
    if (x.shape().size() != 2 || gamma.shape() != Shape{x.shape()[1]} ||
        beta.shape() != Shape{x.shape()[1]}) {
        throw ShapeMismatch("layer_norm: x " + shape_str(x.shape()) + ", gamma " +
                            shape_str(gamma.shape()) + ", beta " +
                            shape_str(beta.shape()));
    }
    const std::size_t rows = x.shape()[0], d = x.shape()[1];
    Tensor<T> out = detail::make_result<T>(x.shape(), {x, gamma, beta}, "layer_norm");
    std::vector<T> xhat(rows * d), inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const T* in = x.value().data() + r * d;
        T mu{};
        for (std::size_t c = 0; c < d; ++c) mu += in[c];
        mu /= T(d);
        T var{};
        for (std::size_t c = 0; c < d; ++c) var += (in[c] - mu) * (in[c] - mu);
        var /= T(d);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_std[r] = inv;
        for (std::size_t c = 0; c < d; ++c) {
            xhat[r * d + c] = (in[c] - mu) * inv;
            out.value()[r * d + c] = gamma.value()[c] * xhat[r * d + c] + beta.value()[c];
        }
    }
    Node<T>*on = out.node.get(), *xn = x.node.get(), *gn = gamma.node.get(),
           *bn = beta.node.get();
    on->backward_fn = [on, xn, gn, bn, rows, d, xhat = std::move(xhat),
                       inv_std = std::move(inv_std)] {
        for (std::size_t r = 0; r < rows; ++r) {
            const T* dy = on->grad.data() + r * d;
            const T* xh = xhat.data() + r * d;
            if (gn->requires_grad) {
                for (std::size_t c = 0; c < d; ++c) gn->grad[c] += dy[c] * xh[c];
            }
            if (bn->requires_grad) {
                for (std::size_t c = 0; c < d; ++c) bn->grad[c] += dy[c];
            }
            if (xn->requires_grad) {
                T mean_g{}, mean_gx{};
                for (std::size_t c = 0; c < d; ++c) {
                    const T g = dy[c] * gn->value[c];
                    mean_g += g;
                    mean_gx += g * xh[c];
                }
                mean_g /= T(d);
                mean_gx /= T(d);
                for (std::size_t c = 0; c < d; ++c) {
                    const T g = dy[c] * gn->value[c];
                    xn->grad[r * d + c] += inv_std[r] * (g - mean_g - xh[c] * mean_gx);
                }
            }
        }
    };
    return out;
}

/// x: [C, D, H, W]; per-channel standardization over the spatial volume,
/// then out = γ_c·x̂ + β_c with γ, β: [C].
template <typename T>
Tensor<T> instance_norm3d(const Tensor<T>& x, const Tensor<T>& gamma,
                          const Tensor<T>& beta, T eps = T(1e-5)) {
    if (x.shape().size() != 4 || gamma.shape() != Shape{x.shape()[0]} ||
        beta.shape() != Shape{x.shape()[0]}) {
        throw ShapeMismatch("instance_norm3d: x " + shape_str(x.shape()) + ", gamma " +
                            shape_str(gamma.shape()) + ", beta " +
                            shape_str(beta.shape()));
    }
    const std::size_t C = x.shape()[0];
    const std::size_t m = x.shape()[1] * x.shape()[2] * x.shape()[3];
    Tensor<T> out = detail::make_result<T>(x.shape(), {x, gamma, beta}, "instance_norm3d");
    std::vector<T> xhat(C * m), inv_std(C);
    for (std::size_t c = 0; c < C; ++c) {
        const T* in = x.value().data() + c * m;
        T mu{};
        for (std::size_t i = 0; i < m; ++i) mu += in[i];
        mu /= T(m);
        T var{};
        for (std::size_t i = 0; i < m; ++i) var += (in[i] - mu) * (in[i] - mu);
        var /= T(m);
        const T inv = T(1) / std::sqrt(var + eps);
        inv_std[c] = inv;
        for (std::size_t i = 0; i < m; ++i) {
            xhat[c * m + i] = (in[i] - mu) * inv;
            out.value()[c * m + i] = gamma.value()[c] * xhat[c * m + i] + beta.value()[c];
        }
    }
    Node<T>*on = out.node.get(), *xn = x.node.get(), *gn = gamma.node.get(),
           *bn = beta.node.get();
    on->backward_fn = [on, xn, gn, bn, C, m, xhat = std::move(xhat),
                       inv_std = std::move(inv_std)] {
        for (std::size_t c = 0; c < C; ++c) {
            const T* dy = on->grad.data() + c * m;
            const T* xh = xhat.data() + c * m;
            if (gn->requires_grad) {
                T s{};
                for (std::size_t i = 0; i < m; ++i) s += dy[i] * xh[i];
                gn->grad[c] += s;
            }
            if (bn->requires_grad) {
                T s{};
                for (std::size_t i = 0; i < m; ++i) s += dy[i];
                bn->grad[c] += s;
            }
            if (xn->requires_grad) {
                const T g = gn->value[c];
                T mean_g{}, mean_gx{};
                for (std::size_t i = 0; i < m; ++i) {
                    mean_g += dy[i] * g;
                    mean_gx += dy[i] * g * xh[i];
                }
                mean_g /= T(m);
                mean_gx /= T(m);
                for (std::size_t i = 0; i < m; ++i) {
                    xn->grad[c * m + i] +=
                        inv_std[c] * (dy[i] * g - mean_g - xh[i] * mean_gx);
                }
            }
        }
    };
    return out;
}

// -------------------------------------------------------------- convolution

namespace detail {

// Output index range [lo, hi) along one axis for kernel offset `off`
// (= tap − pad), so that 0 <= o·stride + off < in_size.
inline void conv_bounds(std::size_t out_size, std::size_t in_size, std::ptrdiff_t off,
                        std::size_t stride, std::size_t& lo, std::size_t& hi) {
    const auto s = static_cast<std::ptrdiff_t>(stride);
    std::ptrdiff_t lo_s = off >= 0 ? 0 : (-off + s - 1) / s;
    std::ptrdiff_t hi_s = (static_cast<std::ptrdiff_t>(in_size) - 1 - off);
    hi_s = hi_s < 0 ? 0 : hi_s / s + 1;
    lo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(lo_s, 0));
    hi = std::min<std::size_t>(out_size, static_cast<std::size_t>(hi_s));
}

}  // namespace detail

/// x: [C_in, D, H, W], k: [C_out, C_in, K, K, K] with K odd, optional bias
/// [C_out]. Cross-correlation with zero padding.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>* bias,
                 std::size_t stride, std::size_t pad) {
    if (x.shape().size() != 4 || k.shape().size() != 5 || k.shape()[1] != x.shape()[0] ||
        k.shape()[2] != k.shape()[3] || k.shape()[3] != k.shape()[4]) {
        throw ShapeMismatch("conv3d: x " + shape_str(x.shape()) + ", k " +
                            shape_str(k.shape()));
    }
    const std::size_t kk = k.shape()[2];
    if (kk % 2 == 0) throw ShapeMismatch("conv3d: kernel size must be odd");
    if (stride == 0) throw ShapeMismatch("conv3d: stride must be >= 1");
    const std::size_t cin = x.shape()[0], cout = k.shape()[0];
    if (bias && bias->shape() != Shape{cout}) {
        throw ShapeMismatch("conv3d: bias " + shape_str(bias->shape()));
    }
    const std::size_t in_d = x.shape()[1], in_h = x.shape()[2], in_w = x.shape()[3];
    auto out_extent = [&](std::size_t n) {
        const std::ptrdiff_t span =
            static_cast<std::ptrdiff_t>(n + 2 * pad) - static_cast<std::ptrdiff_t>(kk);
        if (span < 0) {
            throw NonIntegralOutput("conv3d: kernel " + std::to_string(kk) +
                                    " exceeds padded extent " + std::to_string(n + 2 * pad));
        }
        // floor((n + 2p - k) / s) + 1: the usual strided-conv output size
        return static_cast<std::size_t>(span) / stride + 1;
    };
    const std::size_t od = out_extent(in_d), oh = out_extent(in_h), ow = out_extent(in_w);

    std::vector<Tensor<T>> inputs{x, k};
    if (bias) inputs.push_back(*bias);
    Tensor<T> out = detail::make_result<T>({cout, od, oh, ow}, inputs, "conv3d");

    const std::size_t in_plane = in_h * in_w, in_vol = in_d * in_plane;
    const std::size_t out_plane = oh * ow, out_vol = od * out_plane;
    const std::size_t ker_vol = kk * kk * kk;

    for (std::size_t co = 0; co < cout; ++co) {
        T* o_base = out.value().data() + co * out_vol;
        if (bias) {
            const T b = bias->value()[co];
            for (std::size_t i = 0; i < out_vol; ++i) o_base[i] = b;
        }
        for (std::size_t ci = 0; ci < cin; ++ci) {
            const T* x_base = x.value().data() + ci * in_vol;
            const T* k_base = k.value().data() + (co * cin + ci) * ker_vol;
            for (std::size_t kd = 0; kd < kk; ++kd) {
                const auto offd = static_cast<std::ptrdiff_t>(kd) - static_cast<std::ptrdiff_t>(pad);
                std::size_t d_lo, d_hi;
                detail::conv_bounds(od, in_d, offd, stride, d_lo, d_hi);
                for (std::size_t kh = 0; kh < kk; ++kh) {
                    const auto offh = static_cast<std::ptrdiff_t>(kh) - static_cast<std::ptrdiff_t>(pad);
                    std::size_t h_lo, h_hi;
                    detail::conv_bounds(oh, in_h, offh, stride, h_lo, h_hi);
                    for (std::size_t kw = 0; kw < kk; ++kw) {
                        const auto offw = static_cast<std::ptrdiff_t>(kw) - static_cast<std::ptrdiff_t>(pad);
                        std::size_t w_lo, w_hi;
                        detail::conv_bounds(ow, in_w, offw, stride, w_lo, w_hi);
                        const T kv = k_base[(kd * kk + kh) * kk + kw];
                        if (kv == T{}) continue;
                        for (std::size_t d = d_lo; d < d_hi; ++d) {
                            const std::size_t id = d * stride + static_cast<std::size_t>(offd);
                            for (std::size_t h = h_lo; h < h_hi; ++h) {
                                const std::size_t ih = h * stride + static_cast<std::size_t>(offh);
                                const T* xrow = x_base + id * in_plane + ih * in_w;
                                T* orow = o_base + d * out_plane + h * ow;
                                for (std::size_t w = w_lo; w < w_hi; ++w) {
                                    orow[w] += kv * xrow[w * stride + static_cast<std::size_t>(offw)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    Node<T>*on = out.node.get(), *xn = x.node.get(), *kn = k.node.get();
    Node<T>* bn = bias ? bias->node.get() : nullptr;
    on->backward_fn = [on, xn, kn, bn, cin, cout, in_d, in_h, in_w, od, oh, ow, kk,
                       stride, pad, in_plane, in_vol, out_plane, out_vol, ker_vol] {
        if (bn && bn->requires_grad) {
            for (std::size_t co = 0; co < cout; ++co) {
                const T* g_base = on->grad.data() + co * out_vol;
                T s{};
                for (std::size_t i = 0; i < out_vol; ++i) s += g_base[i];
                bn->grad[co] += s;
            }
        }
        for (std::size_t co = 0; co < cout; ++co) {
            const T* g_base = on->grad.data() + co * out_vol;
            for (std::size_t ci = 0; ci < cin; ++ci) {
                const T* x_base = xn->value.data() + ci * in_vol;
                T* dx_base = xn->requires_grad ? xn->grad.data() + ci * in_vol : nullptr;
                const T* k_base = kn->value.data() + (co * cin + ci) * ker_vol;
                T* dk_base = kn->requires_grad ? kn->grad.data() + (co * cin + ci) * ker_vol
                                               : nullptr;
                for (std::size_t kd = 0; kd < kk; ++kd) {
                    const auto offd = static_cast<std::ptrdiff_t>(kd) - static_cast<std::ptrdiff_t>(pad);
                    std::size_t d_lo, d_hi;
                    detail::conv_bounds(od, in_d, offd, stride, d_lo, d_hi);
                    for (std::size_t kh = 0; kh < kk; ++kh) {
                        const auto offh = static_cast<std::ptrdiff_t>(kh) - static_cast<std::ptrdiff_t>(pad);
                        std::size_t h_lo, h_hi;
                        detail::conv_bounds(oh, in_h, offh, stride, h_lo, h_hi);
                        for (std::size_t kw = 0; kw < kk; ++kw) {
                            const auto offw = static_cast<std::ptrdiff_t>(kw) - static_cast<std::ptrdiff_t>(pad);
                            std::size_t w_lo, w_hi;
                            detail::conv_bounds(ow, in_w, offw, stride, w_lo, w_hi);
                            const T kv = k_base[(kd * kk + kh) * kk + kw];
                            T dk{};
                            for (std::size_t d = d_lo; d < d_hi; ++d) {
                                const std::size_t id = d * stride + static_cast<std::size_t>(offd);
                                for (std::size_t h = h_lo; h < h_hi; ++h) {
                                    const std::size_t ih = h * stride + static_cast<std::size_t>(offh);
                                    const T* xrow = x_base + id * in_plane + ih * in_w;
                                    const T* grow = g_base + d * out_plane + h * ow;
                                    if (dx_base) {
                                        T* dxrow = dx_base + id * in_plane + ih * in_w;
                                        for (std::size_t w = w_lo; w < w_hi; ++w) {
                                            const std::size_t iw =
                                                w * stride + static_cast<std::size_t>(offw);
                                            dxrow[iw] += kv * grow[w];
                                            dk += xrow[iw] * grow[w];
                                        }
                                    } else {
                                        for (std::size_t w = w_lo; w < w_hi; ++w) {
                                            dk += xrow[w * stride + static_cast<std::size_t>(offw)] *
                                                  grow[w];
                                        }
                                    }
                                }
                            }
                            if (dk_base) dk_base[(kd * kk + kh) * kk + kw] += dk;
                        }
                    }
                }
            }
        }
    };
    return out;
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& k, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
    return conv3d(x, k, &bias, stride, pad);
}

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& k, std::size_t stride,
                 std::size_t pad) {
    return conv3d(x, k, static_cast<const Tensor<T>*>(nullptr), stride, pad);
}

// ---------------------------------------------------------------- upsampling

/// x: [C, D, H, W] → [C, fD, fH, fW], align-corners-false trilinear; the
/// backward pass is the exact transpose of the interpolation.
template <typename T>
Tensor<T> upsample_trilinear(const Tensor<T>& x, std::size_t factor) {
    if (x.shape().size() != 4) {
        throw ShapeMismatch("upsample_trilinear: need [C, D, H, W], got " +
                            shape_str(x.shape()));
    }
    if (factor == 0) throw ShapeMismatch("upsample_trilinear: factor must be >= 1");
    const std::size_t C = x.shape()[0], D = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::size_t fd = D * factor, fh = H * factor, fw = W * factor;
    Tensor<T> out = detail::make_result<T>({C, fd, fh, fw}, {x}, "upsample_trilinear");

    // Per-axis corner indices and interpolation weights, clamped to the edge.
    struct AxisTap {
        std::size_t i0, i1;
        T t;
    };
    auto make_taps = [factor](std::size_t out_n, std::size_t in_n) {
        std::vector<AxisTap> taps(out_n);
        for (std::size_t i = 0; i < out_n; ++i) {
            const double c =
                (static_cast<double>(i) + 0.5) / static_cast<double>(factor) - 0.5;
            const double f = std::floor(c);
            double t = c - f;
            std::ptrdiff_t i0 = static_cast<std::ptrdiff_t>(f);
            std::ptrdiff_t i1 = i0 + 1;
            if (i0 < 0) i0 = 0;
            if (i1 < 0) i1 = 0;
            const auto n = static_cast<std::ptrdiff_t>(in_n);
            if (i0 >= n) i0 = n - 1;
            if (i1 >= n) i1 = n - 1;
            taps[i] = {static_cast<std::size_t>(i0), static_cast<std::size_t>(i1),
                       static_cast<T>(t)};
        }
        return taps;
    };
    const auto td = make_taps(fd, D), th = make_taps(fh, H), tw = make_taps(fw, W);

    const std::size_t in_plane = H * W, in_vol = D * in_plane;
    const std::size_t out_plane = fh * fw, out_vol = fd * out_plane;
    for (std::size_t c = 0; c < C; ++c) {
        const T* xin = x.value().data() + c * in_vol;
        T* o = out.value().data() + c * out_vol;
        for (std::size_t d = 0; d < fd; ++d) {
            for (std::size_t h = 0; h < fh; ++h) {
                for (std::size_t w = 0; w < fw; ++w) {
                    const AxisTap&ad = td[d], &ah = th[h], &aw = tw[w];
                    auto v = [&](std::size_t dd, std::size_t hh, std::size_t ww) {
                        return xin[dd * in_plane + hh * W + ww];
                    };
                    const T c00 = v(ad.i0, ah.i0, aw.i0) +
                                  (v(ad.i0, ah.i0, aw.i1) - v(ad.i0, ah.i0, aw.i0)) * aw.t;
                    const T c01 = v(ad.i0, ah.i1, aw.i0) +
                                  (v(ad.i0, ah.i1, aw.i1) - v(ad.i0, ah.i1, aw.i0)) * aw.t;
                    const T c10 = v(ad.i1, ah.i0, aw.i0) +
                                  (v(ad.i1, ah.i0, aw.i1) - v(ad.i1, ah.i0, aw.i0)) * aw.t;
                    const T c11 = v(ad.i1, ah.i1, aw.i0) +
                                  (v(ad.i1, ah.i1, aw.i1) - v(ad.i1, ah.i1, aw.i0)) * aw.t;
                    const T c0 = c00 + (c01 - c00) * ah.t;
                    const T c1 = c10 + (c11 - c10) * ah.t;
                    o[d * out_plane + h * fw + w] = c0 + (c1 - c0) * ad.t;
                }
            }
        }
    }

    Node<T>*on = out.node.get(), *xn = x.node.get();
    on->backward_fn = [on, xn, C, W, fd, fh, fw, in_plane, in_vol, out_plane, out_vol,
                       td, th, tw] {
        if (!xn->requires_grad) return;
        for (std::size_t c = 0; c < C; ++c) {
            T* dx = xn->grad.data() + c * in_vol;
            const T* g = on->grad.data() + c * out_vol;
            for (std::size_t d = 0; d < fd; ++d) {
                for (std::size_t h = 0; h < fh; ++h) {
                    for (std::size_t w = 0; w < fw; ++w) {
                        const AxisTap&ad = td[d], &ah = th[h], &aw = tw[w];
                        const T gv = g[d * out_plane + h * fw + w];
                        const T wd1 = ad.t, wd0 = T(1) - ad.t;
                        const T wh1 = ah.t, wh0 = T(1) - ah.t;
                        const T ww1 = aw.t, ww0 = T(1) - aw.t;
                        auto acc = [&](std::size_t dd, std::size_t hh, std::size_t ww,
                                       T wgt) { dx[dd * in_plane + hh * W + ww] += wgt * gv; };
                        acc(ad.i0, ah.i0, aw.i0, wd0 * wh0 * ww0);
                        acc(ad.i0, ah.i0, aw.i1, wd0 * wh0 * ww1);
                        acc(ad.i0, ah.i1, aw.i0, wd0 * wh1 * ww0);
                        acc(ad.i0, ah.i1, aw.i1, wd0 * wh1 * ww1);
                        acc(ad.i1, ah.i0, aw.i0, wd1 * wh0 * ww0);
                        acc(ad.i1, ah.i0, aw.i1, wd1 * wh0 * ww1);
                        acc(ad.i1, ah.i1, aw.i0, wd1 * wh1 * ww0);
                        acc(ad.i1, ah.i1, aw.i1, wd1 * wh1 * ww1);
                    }
                }
            }
        }
    };
    return out;
}

// ----------------------------------------------------------------- attention

/// z: [N, d]; per head softmax(Q Kᵀ / √(d/heads))·V, heads concatenated and
/// projected by Wo. All four weight matrices are [d, d]; no biases.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& z, std::size_t heads, const Tensor<T>& wq,
                               const Tensor<T>& wk, const Tensor<T>& wv,
                               const Tensor<T>& wo) {
    if (z.shape().size() != 2) {
        throw ShapeMismatch("multi_head_attention: tokens " + shape_str(z.shape()));
    }
    const std::size_t d = z.shape()[1];
    const Shape wshape{d, d};
    if (wq.shape() != wshape || wk.shape() != wshape || wv.shape() != wshape ||
        wo.shape() != wshape) {
        throw ShapeMismatch("multi_head_attention: weights must be [d, d]");
    }
    if (heads == 0 || d % heads != 0) {
        throw IndivisibleHeads("multi_head_attention: d=" + std::to_string(d) +
                               " not divisible by heads=" + std::to_string(heads));
    }
    const std::size_t dh = d / heads;
    const T inv_sqrt_dh = T(1) / std::sqrt(T(dh));

    Tensor<T> q = matmul(z, wq), k = matmul(z, wk), v = matmul(z, wv);
    std::vector<Tensor<T>> head_outputs;
    head_outputs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Tensor<T> qh = slice_cols(q, h * dh, (h + 1) * dh);
        Tensor<T> kh = slice_cols(k, h * dh, (h + 1) * dh);
        Tensor<T> vh = slice_cols(v, h * dh, (h + 1) * dh);
        Tensor<T> attn = softmax(scale(matmul(qh, transpose2d(kh)), inv_sqrt_dh));
        head_outputs.push_back(matmul(attn, vh));
    }
    return matmul(concat(head_outputs, 1), wo);
}

}  // namespace liverformer::ad
