#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include "kspu/errors.hpp"

// Minimal tensor library with reverse-mode automatic differentiation.
// Tensors are dense row-major buffers; ops build a graph of shared nodes and
// backward() walks it in reverse creation order. A graph is confined to one
// thread. T is float for training, double for gradient verification.
namespace kspu::nn {

template <typename T>
struct Node {
    std::vector<int> shape;
    std::vector<T> value;
    std::vector<T> grad;  // allocated on demand, same length as value
    bool requires_grad = false;
    long seq = 0;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward_fn;

    int numel() const { return static_cast<int>(value.size()); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
};

namespace detail {
inline long next_seq() {
    static std::atomic<long> counter{0};
    return ++counter;
}
inline int shape_numel(const std::vector<int>& shape) {
    int n = 1;
    for (int d : shape) n *= d;
    return n;
}
}  // namespace detail

template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

    static Tensor from(std::vector<int> shape, std::vector<T> data, bool requires_grad = false) {
        if (detail::shape_numel(shape) != static_cast<int>(data.size()))
            throw ShapeMismatch("Tensor::from: data length does not match shape");
        auto n = std::make_shared<Node<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        n->seq = detail::next_seq();
        return Tensor(std::move(n));
    }

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
        const int n = detail::shape_numel(shape);
        return from(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
    }

    static Tensor full(std::vector<int> shape, T v, bool requires_grad = false) {
        const int n = detail::shape_numel(shape);
        return from(std::move(shape), std::vector<T>(n, v), requires_grad);
    }

    static Tensor scalar(T v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return static_cast<bool>(n_); }
    const std::vector<int>& shape() const { return n_->shape; }
    int numel() const { return n_->numel(); }
    const std::vector<T>& value() const { return n_->value; }
    std::vector<T>& mutable_value() { return n_->value; }
    const std::vector<T>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    std::shared_ptr<Node<T>> node() const { return n_; }

    T item() const {
        if (numel() != 1) throw ShapeMismatch("Tensor::item: tensor is not a scalar");
        return n_->value[0];
    }

    void zero_grad() { n_->grad.clear(); }

    // Reverse-mode sweep from a scalar root.
    void backward() const {
        if (numel() != 1) throw ShapeMismatch("backward: root must be a scalar");
        std::vector<Node<T>*> order;
        std::vector<Node<T>*> stack{n_.get()};
        std::vector<Node<T>*> seen;
        auto mark = [&seen](Node<T>* p) {
            // Nodes carry a seq id unique per process; linear scan would be
            // slow, so use a sorted vector as the visited set.
            auto it = std::lower_bound(seen.begin(), seen.end(), p);
            if (it != seen.end() && *it == p) return false;
            seen.insert(it, p);
            return true;
        };
        mark(n_.get());
        while (!stack.empty()) {
            Node<T>* cur = stack.back();
            stack.pop_back();
            order.push_back(cur);
            for (auto& parent : cur->parents)
                if (mark(parent.get())) stack.push_back(parent.get());
        }
        std::sort(order.begin(), order.end(),
                  [](const Node<T>* a, const Node<T>* b) { return a->seq > b->seq; });
        n_->ensure_grad();
        n_->grad[0] = T(1);
        for (Node<T>* node : order)
            if (node->backward_fn && node->requires_grad && !node->grad.empty())
                node->backward_fn(*node);
    }

private:
    std::shared_ptr<Node<T>> n_;
};

namespace detail {

template <typename T>
Tensor<T> make_op(std::vector<int> shape, std::vector<T> value,
                  std::vector<Tensor<T>> parents, std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->seq = next_seq();
    bool req = false;
    for (auto& p : parents) {
        n->parents.push_back(p.node());
        req = req || p.node()->requires_grad;
    }
    n->requires_grad = req;
    if (req) n->backward_fn = std::move(backward);
    return Tensor<T>(std::move(n));
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) throw ShapeMismatch(std::string(op) + ": shapes differ");
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace detail

// ---- elementwise arithmetic ------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> v(a.numel());
    for (int i = 0; i < a.numel(); ++i) v[i] = a.value()[i] + b.value()[i];
    return detail::make_op<T>(a.shape(), std::move(v), {a, b}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        for (int i = 0; i < self.numel(); ++i) {
            pa.grad[i] += self.grad[i];
            pb.grad[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<T> v(a.numel());
    for (int i = 0; i < a.numel(); ++i) v[i] = a.value()[i] - b.value()[i];
    return detail::make_op<T>(a.shape(), std::move(v), {a, b}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        for (int i = 0; i < self.numel(); ++i) {
            pa.grad[i] += self.grad[i];
            pb.grad[i] -= self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<T> v(a.numel());
    for (int i = 0; i < a.numel(); ++i) v[i] = a.value()[i] * b.value()[i];
    return detail::make_op<T>(a.shape(), std::move(v), {a, b}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        for (int i = 0; i < self.numel(); ++i) {
            pa.grad[i] += self.grad[i] * pb.value[i];
            pb.grad[i] += self.grad[i] * pa.value[i];
        }
    });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<T> v(a.numel());
    for (int i = 0; i < a.numel(); ++i) v[i] = a.value()[i] / b.value()[i];
    return detail::make_op<T>(a.shape(), std::move(v), {a, b}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        for (int i = 0; i < self.numel(); ++i) {
            const T inv = T(1) / pb.value[i];
            pa.grad[i] += self.grad[i] * inv;
            pb.grad[i] -= self.grad[i] * pa.value[i] * inv * inv;
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    std::vector<T> v(a.numel());
    for (int i = 0; i < a.numel(); ++i) v[i] = a.value()[i] * c;
    return detail::make_op<T>(a.shape(), std::move(v), {a}, [c](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (int i = 0; i < self.numel(); ++i) pa.grad[i] += self.grad[i] * c;
    });
}

template <typename T>
Tensor<T> add_const(const Tensor<T>& a, T c) {
    std::vector<T> v(a.numel());
    for (int i = 0; i < a.numel(); ++i) v[i] = a.value()[i] + c;
    return detail::make_op<T>(a.shape(), std::move(v), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (int i = 0; i < self.numel(); ++i) pa.grad[i] += self.grad[i];
    });
}

// Multiply / divide a tensor by a one-element tensor (broadcast scalar).
template <typename T>
Tensor<T> mul_bscalar(const Tensor<T>& a, const Tensor<T>& s) {
    if (s.numel() != 1) throw ShapeMismatch("mul_bscalar: s must have one element");
    const T sv = s.value()[0];
    std::vector<T> v(a.numel());
    for (int i = 0; i < a.numel(); ++i) v[i] = a.value()[i] * sv;
    return detail::make_op<T>(a.shape(), std::move(v), {a, s}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& ps = *self.parents[1];
        pa.ensure_grad();
        ps.ensure_grad();
        const T sv = ps.value[0];
        T acc = T(0);
        for (int i = 0; i < self.numel(); ++i) {
            pa.grad[i] += self.grad[i] * sv;
            acc += self.grad[i] * pa.value[i];
        }
        ps.grad[0] += acc;
    });
}

template <typename T>
Tensor<T> div_bscalar(const Tensor<T>& a, const Tensor<T>& s) {
    if (s.numel() != 1) throw ShapeMismatch("div_bscalar: s must have one element");
    const T sv = s.value()[0];
    std::vector<T> v(a.numel());
    for (int i = 0; i < a.numel(); ++i) v[i] = a.value()[i] / sv;
    return detail::make_op<T>(a.shape(), std::move(v), {a, s}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& ps = *self.parents[1];
        pa.ensure_grad();
        ps.ensure_grad();
        const T inv = T(1) / ps.value[0];
        T acc = T(0);
        for (int i = 0; i < self.numel(); ++i) {
            pa.grad[i] += self.grad[i] * inv;
            acc -= self.grad[i] * pa.value[i] * inv * inv;
        }
        ps.grad[0] += acc;
    });
}

// ---- nonlinearities ---------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (int i = 0; i < a.numel(); ++i) v[i] = a.value()[i] > T(0) ? a.value()[i] : T(0);
    return detail::make_op<T>(a.shape(), std::move(v), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (int i = 0; i < self.numel(); ++i)
            if (pa.value[i] > T(0)) pa.grad[i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (int i = 0; i < a.numel(); ++i) v[i] = T(1) / (T(1) + std::exp(-a.value()[i]));
    return detail::make_op<T>(a.shape(), std::move(v), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (int i = 0; i < self.numel(); ++i) {
            const T s = self.value[i];
            pa.grad[i] += self.grad[i] * s * (T(1) - s);
        }
    });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (int i = 0; i < a.numel(); ++i) {
        const T x = a.value()[i];
        v[i] = x > T(0) ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
    }
    return detail::make_op<T>(a.shape(), std::move(v), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (int i = 0; i < self.numel(); ++i)
            pa.grad[i] += self.grad[i] / (T(1) + std::exp(-pa.value[i]));
    });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (int i = 0; i < a.numel(); ++i) v[i] = std::exp(a.value()[i]);
    return detail::make_op<T>(a.shape(), std::move(v), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (int i = 0; i < self.numel(); ++i) pa.grad[i] += self.grad[i] * self.value[i];
    });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (int i = 0; i < a.numel(); ++i) v[i] = std::log(a.value()[i]);
    return detail::make_op<T>(a.shape(), std::move(v), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (int i = 0; i < self.numel(); ++i) pa.grad[i] += self.grad[i] / pa.value[i];
    });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
    std::vector<T> v(a.numel());
    for (int i = 0; i < a.numel(); ++i) v[i] = std::sqrt(a.value()[i]);
    return detail::make_op<T>(a.shape(), std::move(v), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (int i = 0; i < self.numel(); ++i)
            pa.grad[i] += self.grad[i] / (T(2) * self.value[i]);
    });
}

// Elementwise min(a, c); the gradient passes through where a < c.
template <typename T>
Tensor<T> clamp_max(const Tensor<T>& a, T c) {
    std::vector<T> v(a.numel());
    for (int i = 0; i < a.numel(); ++i) v[i] = std::min(a.value()[i], c);
    return detail::make_op<T>(a.shape(), std::move(v), {a}, [c](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (int i = 0; i < self.numel(); ++i)
            if (pa.value[i] < c) pa.grad[i] += self.grad[i];
    });
}

// ---- reductions and reshaping ----------------------------------------------

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a) {
    T acc = T(0);
    for (int i = 0; i < a.numel(); ++i) acc += a.value()[i];
    return detail::make_op<T>({1}, {acc}, {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (int i = 0; i < pa.numel(); ++i) pa.grad[i] += self.grad[0];
    });
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a) {
    T acc = T(0);
    for (int i = 0; i < a.numel(); ++i) acc += a.value()[i];
    acc /= static_cast<T>(a.numel());
    return detail::make_op<T>({1}, {acc}, {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        const T inv = T(1) / static_cast<T>(pa.numel());
        for (int i = 0; i < pa.numel(); ++i) pa.grad[i] += self.grad[0] * inv;
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::vector<int> shape) {
    if (detail::shape_numel(shape) != a.numel()) throw ShapeMismatch("reshape: numel changed");
    std::vector<T> v = a.value();
    return detail::make_op<T>(std::move(shape), std::move(v), {a}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (int i = 0; i < self.numel(); ++i) pa.grad[i] += self.grad[i];
    });
}

// Contiguous slice of a 1-D tensor.
template <typename T>
Tensor<T> slice_vec(const Tensor<T>& a, int begin, int count) {
    if (a.shape().size() != 1) throw ShapeMismatch("slice_vec: expected a vector");
    if (begin < 0 || begin + count > a.numel()) throw ShapeMismatch("slice_vec: range out of bounds");
    std::vector<T> v(a.value().begin() + begin, a.value().begin() + begin + count);
    return detail::make_op<T>({count}, std::move(v), {a}, [begin](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (int i = 0; i < self.numel(); ++i) pa.grad[begin + i] += self.grad[i];
    });
}

// Stack one-element tensors into a vector.
template <typename T>
Tensor<T> stack_scalars(const std::vector<Tensor<T>>& xs) {
    std::vector<T> v;
    v.reserve(xs.size());
    for (const auto& x : xs) {
        if (x.numel() != 1) throw ShapeMismatch("stack_scalars: inputs must be scalars");
        v.push_back(x.value()[0]);
    }
    return detail::make_op<T>({static_cast<int>(xs.size())}, std::move(v), xs, [](Node<T>& self) {
        for (size_t i = 0; i < self.parents.size(); ++i) {
            self.parents[i]->ensure_grad();
            self.parents[i]->grad[0] += self.grad[i];
        }
    });
}

// [a0, b0, a1, b1, ...]; the column-major vec of a 2 x n matrix whose rows
// are a and b.
template <typename T>
Tensor<T> interleave2(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "interleave2");
    const int n = a.numel();
    std::vector<T> v(2 * n);
    for (int i = 0; i < n; ++i) {
        v[2 * i] = a.value()[i];
        v[2 * i + 1] = b.value()[i];
    }
    return detail::make_op<T>({2 * n}, std::move(v), {a, b}, [n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        for (int i = 0; i < n; ++i) {
            pa.grad[i] += self.grad[2 * i];
            pb.grad[i] += self.grad[2 * i + 1];
        }
    });
}

// ---- linear algebra ----------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeMismatch("matmul: incompatible shapes");
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    using Mat = detail::RowMat<T>;
    Eigen::Map<const Mat> ma(a.value().data(), m, k);
    Eigen::Map<const Mat> mb(b.value().data(), k, n);
    std::vector<T> v(static_cast<size_t>(m) * n);
    Eigen::Map<Mat>(v.data(), m, n) = ma * mb;
    return detail::make_op<T>({m, n}, std::move(v), {a, b}, [m, k, n](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        Eigen::Map<const Mat> g(self.grad.data(), m, n);
        Eigen::Map<const Mat> va(pa.value.data(), m, k);
        Eigen::Map<const Mat> vb(pb.value.data(), k, n);
        Eigen::Map<Mat>(pa.grad.data(), m, k) += g * vb.transpose();
        Eigen::Map<Mat>(pb.grad.data(), k, n) += va.transpose() * g;
    });
}

namespace detail {

// im2col for stride-1 convolution: K = cin*kh*kw rows, P = ho*wo columns.
template <typename T>
void im2col(const T* x, int cin, int h, int w, int kh, int kw, int pad, int ho, int wo,
            RowMat<T>& col) {
    col.setZero(cin * kh * kw, static_cast<Eigen::Index>(ho) * wo);
    for (int ci = 0; ci < cin; ++ci) {
        const T* plane = x + static_cast<size_t>(ci) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const int row = (ci * kh + ky) * kw + kx;
                T* dst = col.data() + static_cast<size_t>(row) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int sy = oy + ky - pad;
                    if (sy < 0 || sy >= h) continue;
                    const int x0 = std::max(0, pad - kx);
                    const int x1 = std::min(wo, w + pad - kx);
                    const T* src = plane + static_cast<size_t>(sy) * w + (x0 + kx - pad);
                    std::copy(src, src + (x1 - x0), dst + static_cast<size_t>(oy) * wo + x0);
                }
            }
        }
    }
}

// Transpose of im2col: scatter-add column gradients back onto the image.
template <typename T>
void col2im(const RowMat<T>& col, int cin, int h, int w, int kh, int kw, int pad, int ho, int wo,
            T* gx) {
    for (int ci = 0; ci < cin; ++ci) {
        T* plane = gx + static_cast<size_t>(ci) * h * w;
        for (int ky = 0; ky < kh; ++ky) {
            for (int kx = 0; kx < kw; ++kx) {
                const int row = (ci * kh + ky) * kw + kx;
                const T* src = col.data() + static_cast<size_t>(row) * ho * wo;
                for (int oy = 0; oy < ho; ++oy) {
                    const int sy = oy + ky - pad;
                    if (sy < 0 || sy >= h) continue;
                    const int x0 = std::max(0, pad - kx);
                    const int x1 = std::min(wo, w + pad - kx);
                    T* dst = plane + static_cast<size_t>(sy) * w + (x0 + kx - pad);
                    const T* s = src + static_cast<size_t>(oy) * wo + x0;
                    for (int i = 0; i < x1 - x0; ++i) dst[i] += s[i];
                }
            }
        }
    }
}

}  // namespace detail

// Stride-1 2-D convolution (cross-correlation) of x (cin,h,w) with kernel
// (cout,cin,kh,kw). pad < 0 selects "same" padding (kh/2), which preserves
// the spatial size for odd kernels.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, int pad = -1) {
    if (x.shape().size() != 3 || kernel.shape().size() != 4)
        throw ShapeMismatch("conv2d: expected (c,h,w) input and (co,ci,kh,kw) kernel");
    const int cin = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const int cout = kernel.shape()[0], kh = kernel.shape()[2], kw = kernel.shape()[3];
    if (kernel.shape()[1] != cin) throw ShapeMismatch("conv2d: channel mismatch");
    if (pad < 0) pad = kh / 2;
    const int ho = h + 2 * pad - kh + 1, wo = w + 2 * pad - kw + 1;
    if (ho <= 0 || wo <= 0) throw ShapeMismatch("conv2d: kernel larger than padded input");

    using Mat = detail::RowMat<T>;
    Mat col;
    detail::im2col(x.value().data(), cin, h, w, kh, kw, pad, ho, wo, col);
    Eigen::Map<const Mat> wmat(kernel.value().data(), cout, cin * kh * kw);
    std::vector<T> v(static_cast<size_t>(cout) * ho * wo);
    Eigen::Map<Mat>(v.data(), cout, static_cast<Eigen::Index>(ho) * wo) = wmat * col;

    return detail::make_op<T>(
        {cout, ho, wo}, std::move(v), {x, kernel},
        [cin, h, w, cout, kh, kw, pad, ho, wo](Node<T>& self) {
            auto& px = *self.parents[0];
            auto& pk = *self.parents[1];
            px.ensure_grad();
            pk.ensure_grad();
            Mat col;
            detail::im2col(px.value.data(), cin, h, w, kh, kw, pad, ho, wo, col);
            Eigen::Map<const Mat> g(self.grad.data(), cout, static_cast<Eigen::Index>(ho) * wo);
            Eigen::Map<Mat>(pk.grad.data(), cout, cin * kh * kw) += g * col.transpose();
            Eigen::Map<const Mat> wmat(pk.value.data(), cout, cin * kh * kw);
            Mat gcol = wmat.transpose() * g;
            detail::col2im(gcol, cin, h, w, kh, kw, pad, ho, wo, px.grad.data());
        });
}

// ---- feature-map ops ---------------------------------------------------------

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 3 || b.shape().size() != 3 || a.shape()[1] != b.shape()[1] ||
        a.shape()[2] != b.shape()[2])
        throw ShapeMismatch("concat_channels: spatial dims differ");
    const int ca = a.shape()[0], cb = b.shape()[0], h = a.shape()[1], w = a.shape()[2];
    std::vector<T> v;
    v.reserve(static_cast<size_t>(ca + cb) * h * w);
    v.insert(v.end(), a.value().begin(), a.value().end());
    v.insert(v.end(), b.value().begin(), b.value().end());
    return detail::make_op<T>({ca + cb, h, w}, std::move(v), {a, b}, [](Node<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        pa.ensure_grad();
        pb.ensure_grad();
        const int na = pa.numel();
        for (int i = 0; i < na; ++i) pa.grad[i] += self.grad[i];
        for (int i = 0; i < pb.numel(); ++i) pb.grad[i] += self.grad[na + i];
    });
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& a, int begin, int count) {
    if (a.shape().size() != 3) throw ShapeMismatch("slice_channels: expected (c,h,w)");
    const int c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
    if (begin < 0 || begin + count > c) throw ShapeMismatch("slice_channels: range out of bounds");
    const int plane = h * w;
    std::vector<T> v(a.value().begin() + static_cast<size_t>(begin) * plane,
                     a.value().begin() + static_cast<size_t>(begin + count) * plane);
    return detail::make_op<T>({count, h, w}, std::move(v), {a}, [begin, plane](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (int i = 0; i < self.numel(); ++i)
            pa.grad[static_cast<size_t>(begin) * plane + i] += self.grad[i];
    });
}

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& a) {
    if (a.shape().size() != 3) throw ShapeMismatch("avg_pool2: expected (c,h,w)");
    const int c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
    if (h % 2 != 0 || w % 2 != 0) throw ShapeMismatch("avg_pool2: spatial dims must be even");
    const int ho = h / 2, wo = w / 2;
    std::vector<T> v(static_cast<size_t>(c) * ho * wo);
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < ho; ++y)
            for (int x = 0; x < wo; ++x) {
                const T* p = a.value().data() + (static_cast<size_t>(ci) * h + 2 * y) * w + 2 * x;
                v[(static_cast<size_t>(ci) * ho + y) * wo + x] =
                    (p[0] + p[1] + p[w] + p[w + 1]) * T(0.25);
            }
    return detail::make_op<T>({c, ho, wo}, std::move(v), {a}, [c, h, w, ho, wo](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < ho; ++y)
                for (int x = 0; x < wo; ++x) {
                    const T g = self.grad[(static_cast<size_t>(ci) * ho + y) * wo + x] * T(0.25);
                    T* p = pa.grad.data() + (static_cast<size_t>(ci) * h + 2 * y) * w + 2 * x;
                    p[0] += g;
                    p[1] += g;
                    p[w] += g;
                    p[w + 1] += g;
                }
    });
}

template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& a) {
    if (a.shape().size() != 3) throw ShapeMismatch("upsample_nearest2: expected (c,h,w)");
    const int c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
    const int ho = 2 * h, wo = 2 * w;
    std::vector<T> v(static_cast<size_t>(c) * ho * wo);
    for (int ci = 0; ci < c; ++ci)
        for (int y = 0; y < ho; ++y)
            for (int x = 0; x < wo; ++x)
                v[(static_cast<size_t>(ci) * ho + y) * wo + x] =
                    a.value()[(static_cast<size_t>(ci) * h + y / 2) * w + x / 2];
    return detail::make_op<T>({c, ho, wo}, std::move(v), {a}, [c, h, w, ho, wo](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        for (int ci = 0; ci < c; ++ci)
            for (int y = 0; y < ho; ++y)
                for (int x = 0; x < wo; ++x)
                    pa.grad[(static_cast<size_t>(ci) * h + y / 2) * w + x / 2] +=
                        self.grad[(static_cast<size_t>(ci) * ho + y) * wo + x];
    });
}

// Broadcast a length-c vector to a (c,h,w) feature map.
template <typename T>
Tensor<T> broadcast_spatial(const Tensor<T>& v, int h, int w) {
    if (v.shape().size() != 1) throw ShapeMismatch("broadcast_spatial: expected a vector");
    const int c = v.shape()[0];
    std::vector<T> out(static_cast<size_t>(c) * h * w);
    for (int ci = 0; ci < c; ++ci)
        std::fill(out.begin() + static_cast<size_t>(ci) * h * w,
                  out.begin() + static_cast<size_t>(ci + 1) * h * w, v.value()[ci]);
    return detail::make_op<T>({c, h, w}, std::move(out), {v}, [c, h, w](Node<T>& self) {
        auto& pv = *self.parents[0];
        pv.ensure_grad();
        for (int ci = 0; ci < c; ++ci) {
            T acc = T(0);
            const T* g = self.grad.data() + static_cast<size_t>(ci) * h * w;
            for (int i = 0; i < h * w; ++i) acc += g[i];
            pv.grad[ci] += acc;
        }
    });
}

// Per-channel spatial mean: (c,h,w) -> (c).
template <typename T>
Tensor<T> spatial_mean(const Tensor<T>& a) {
    if (a.shape().size() != 3) throw ShapeMismatch("spatial_mean: expected (c,h,w)");
    const int c = a.shape()[0], plane = a.shape()[1] * a.shape()[2];
    std::vector<T> v(c);
    for (int ci = 0; ci < c; ++ci) {
        T acc = T(0);
        const T* p = a.value().data() + static_cast<size_t>(ci) * plane;
        for (int i = 0; i < plane; ++i) acc += p[i];
        v[ci] = acc / static_cast<T>(plane);
    }
    return detail::make_op<T>({c}, std::move(v), {a}, [c, plane](Node<T>& self) {
        auto& pa = *self.parents[0];
        pa.ensure_grad();
        const T inv = T(1) / static_cast<T>(plane);
        for (int ci = 0; ci < c; ++ci) {
            const T g = self.grad[ci] * inv;
            T* p = pa.grad.data() + static_cast<size_t>(ci) * plane;
            for (int i = 0; i < plane; ++i) p[i] += g;
        }
    });
}

// Mean binary cross-entropy with logits. The target is treated as data: no
// gradient is propagated to it.
template <typename T>
Tensor<T> bce_with_logits_mean(const Tensor<T>& logits, const Tensor<T>& target) {
    detail::check_same_shape(logits, target, "bce_with_logits_mean");
    T acc = T(0);
    for (int i = 0; i < logits.numel(); ++i) {
        const T x = logits.value()[i], y = target.value()[i];
        acc += std::max(x, T(0)) - x * y + std::log1p(std::exp(-std::abs(x)));
    }
    acc /= static_cast<T>(logits.numel());
    return detail::make_op<T>({1}, {acc}, {logits, target}, [](Node<T>& self) {
        auto& pl = *self.parents[0];
        auto& pt = *self.parents[1];
        pl.ensure_grad();
        const T inv = T(1) / static_cast<T>(pl.numel());
        for (int i = 0; i < pl.numel(); ++i) {
            const T s = T(1) / (T(1) + std::exp(-pl.value[i]));
            pl.grad[i] += self.grad[0] * (s - pt.value[i]) * inv;
        }
    });
}

// ---- small conveniences -------------------------------------------------------

template <typename T>
Tensor<T> dot(const Tensor<T>& a, const Tensor<T>& b) {
    return reduce_sum(mul(a, b));
}

// Dense layer y = W x + b for a 1-D input.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    const int in = x.shape()[0];
    const int out = weight.shape()[0];
    if (weight.shape()[1] != in || bias.shape()[0] != out)
        throw ShapeMismatch("linear: weight/bias shapes do not match input");
    Tensor<T> y = matmul(weight, reshape(x, {in, 1}));
    return add(reshape(y, {out}), bias);
}

}  // namespace kspu::nn
