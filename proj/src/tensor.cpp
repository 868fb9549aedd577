#include "dtn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "dtn/kernels.hpp"

namespace dtn::ag {

std::size_t numel(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                                shape_str(a) + " and " + shape_str(b));
}

void check_shape(const Shape& s, const char* op) {
    if (s.empty())
        throw std::invalid_argument(std::string(op) + ": empty shape");
    for (int d : s)
        if (d <= 0)
            throw std::invalid_argument(std::string(op) +
                                        ": nonpositive dimension in " + shape_str(s));
}

thread_local bool t_recording = true;

}  // namespace

void Node::ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
    return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
    check_shape(shape, "tensor");
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value.assign(numel(shape), v);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::from(const Shape& shape, std::vector<double> data, bool requires_grad) {
    check_shape(shape, "tensor");
    if (numel(shape) != data.size())
        throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                    " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return from({1}, {v}, requires_grad);
}

double Tensor::item() const {
    if (n_->value.size() != 1)
        throw std::invalid_argument("item: tensor " + shape_str(n_->shape) +
                                    " is not scalar");
    return n_->value[0];
}

void Tensor::zero_grad() {
    if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
}

// ---- tape -----------------------------------------------------------------

Tape& Tape::current() {
    thread_local Tape tape;
    return tape;
}

void Tape::record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
}

void Tape::replay_backward() {
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
    ops_.clear();
}

bool grad_recording_enabled() { return t_recording; }

NoGradGuard::NoGradGuard() : prev_(t_recording) { t_recording = false; }
NoGradGuard::~NoGradGuard() { t_recording = prev_; }

namespace {

Tensor make_out(const Shape& shape, bool rg) {
    auto n = std::make_shared<Node>();
    n->shape = shape;
    n->value.resize(numel(shape));
    n->requires_grad = rg && t_recording;
    return Tensor(n);
}

bool want_grad(std::initializer_list<const Tensor*> ins) {
    if (!t_recording) return false;
    for (const Tensor* t : ins)
        if ((*t).requires_grad()) return true;
    return false;
}

void record(std::function<void()> fn) { Tape::current().record(std::move(fn)); }

}  // namespace

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    const std::size_t an = a.size(), bn = b.size();
    bool same = as == bs;
    bool scalar = bn == 1;
    // suffix broadcast (bias over trailing dims)
    bool suffix = !same && !scalar && bs.size() <= as.size() &&
                  std::equal(bs.rbegin(), bs.rend(), as.rbegin());
    if (!same && !scalar && !suffix) shape_error("add", as, bs);

    bool rg = want_grad({&a, &b});
    Tensor out = make_out(as, rg);
    auto& o = out.data();
    const auto& av = a.data();
    const auto& bv = b.data();
    if (same) {
        for (std::size_t i = 0; i < an; ++i) o[i] = av[i] + bv[i];
    } else if (scalar) {
        for (std::size_t i = 0; i < an; ++i) o[i] = av[i] + bv[0];
    } else {
        for (std::size_t i = 0; i < an; ++i) o[i] = av[i] + bv[i % bn];
    }
    if (rg) {
        auto an_ = a.node(), bn_ = b.node(), on_ = out.node();
        record([an_, bn_, on_] {
            const auto& g = on_->grad;
            if (an_->requires_grad) {
                an_->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) an_->grad[i] += g[i];
            }
            if (bn_->requires_grad) {
                bn_->ensure_grad();
                const std::size_t bn2 = bn_->value.size();
                for (std::size_t i = 0; i < g.size(); ++i) bn_->grad[i % bn2] += g[i];
            }
        });
    }
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    bool same = as == bs;
    bool scalar = b.size() == 1;
    if (!same && !scalar) shape_error("mul", as, bs);
    bool rg = want_grad({&a, &b});
    Tensor out = make_out(as, rg);
    auto& o = out.data();
    const auto& av = a.data();
    const auto& bv = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * (same ? bv[i] : bv[0]);
    if (rg) {
        auto an_ = a.node(), bn_ = b.node(), on_ = out.node();
        bool same_ = same;
        record([an_, bn_, on_, same_] {
            const auto& g = on_->grad;
            if (an_->requires_grad) {
                an_->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i)
                    an_->grad[i] += g[i] * (same_ ? bn_->value[i] : bn_->value[0]);
            }
            if (bn_->requires_grad) {
                bn_->ensure_grad();
                if (same_) {
                    for (std::size_t i = 0; i < g.size(); ++i)
                        bn_->grad[i] += g[i] * an_->value[i];
                } else {
                    double acc = 0.0;
                    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * an_->value[i];
                    bn_->grad[0] += acc;
                }
            }
        });
    }
    return out;
}

Tensor scale(const Tensor& a, double c) {
    bool rg = want_grad({&a});
    Tensor out = make_out(a.shape(), rg);
    const auto& av = a.data();
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * c;
    if (rg) {
        auto an_ = a.node(), on_ = out.node();
        record([an_, on_, c] {
            an_->ensure_grad();
            for (std::size_t i = 0; i < on_->grad.size(); ++i)
                an_->grad[i] += on_->grad[i] * c;
        });
    }
    return out;
}

Tensor add_scalar(const Tensor& a, double c) {
    bool rg = want_grad({&a});
    Tensor out = make_out(a.shape(), rg);
    const auto& av = a.data();
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + c;
    if (rg) {
        auto an_ = a.node(), on_ = out.node();
        record([an_, on_] {
            an_->ensure_grad();
            for (std::size_t i = 0; i < on_->grad.size(); ++i)
                an_->grad[i] += on_->grad[i];
        });
    }
    return out;
}

// ---- matmul family --------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w) {
    const auto& xs = x.shape();
    const auto& ws = w.shape();
    if (ws.size() != 2 || xs.empty() || xs.back() != ws[0])
        shape_error("linear", xs, ws);
    const std::size_t k = static_cast<std::size_t>(ws[0]);
    const std::size_t n = static_cast<std::size_t>(ws[1]);
    const std::size_t m = x.size() / k;
    Shape os(xs);
    os.back() = ws[1];
    bool rg = want_grad({&x, &w});
    Tensor out = make_out(os, rg);
    std::fill(out.data().begin(), out.data().end(), 0.0);
    kernels::matmul(x.data().data(), w.data().data(), out.data().data(), m, k, n);
    if (rg) {
        auto xn = x.node(), wn = w.node(), on = out.node();
        record([xn, wn, on, m, k, n] {
            if (xn->requires_grad) {
                xn->ensure_grad();
                kernels::matmul_bt(on->grad.data(), wn->value.data(), xn->grad.data(),
                                   m, n, k);
            }
            if (wn->requires_grad) {
                wn->ensure_grad();
                kernels::matmul_at(xn->value.data(), on->grad.data(), wn->grad.data(),
                                   k, m, n);
            }
        });
    }
    return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2)
        shape_error("matmul", a.shape(), b.shape());
    return linear(a, b);
}

Tensor bmm(const Tensor& a, const Tensor& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[1])
        shape_error("bmm", as, bs);
    const std::size_t g = as[0], m = as[1], k = as[2], n = bs[2];
    bool rg = want_grad({&a, &b});
    Tensor out = make_out({as[0], as[1], bs[2]}, rg);
    std::fill(out.data().begin(), out.data().end(), 0.0);
    for (std::size_t i = 0; i < g; ++i)
        kernels::matmul(a.data().data() + i * m * k, b.data().data() + i * k * n,
                        out.data().data() + i * m * n, m, k, n);
    if (rg) {
        auto an_ = a.node(), bn_ = b.node(), on_ = out.node();
        record([an_, bn_, on_, g, m, k, n] {
            if (an_->requires_grad) {
                an_->ensure_grad();
                for (std::size_t i = 0; i < g; ++i)
                    kernels::matmul_bt(on_->grad.data() + i * m * n,
                                       bn_->value.data() + i * k * n,
                                       an_->grad.data() + i * m * k, m, n, k);
            }
            if (bn_->requires_grad) {
                bn_->ensure_grad();
                for (std::size_t i = 0; i < g; ++i)
                    kernels::matmul_at(an_->value.data() + i * m * k,
                                       on_->grad.data() + i * m * n,
                                       bn_->grad.data() + i * k * n, k, m, n);
            }
        });
    }
    return out;
}

Tensor bmm_bt(const Tensor& a, const Tensor& b) {
    const auto& as = a.shape();
    const auto& bs = b.shape();
    if (as.size() != 3 || bs.size() != 3 || as[0] != bs[0] || as[2] != bs[2])
        shape_error("bmm_bt", as, bs);
    const std::size_t g = as[0], m = as[1], k = as[2], n = bs[1];
    bool rg = want_grad({&a, &b});
    Tensor out = make_out({as[0], as[1], bs[1]}, rg);
    std::fill(out.data().begin(), out.data().end(), 0.0);
    for (std::size_t i = 0; i < g; ++i)
        kernels::matmul_bt(a.data().data() + i * m * k, b.data().data() + i * n * k,
                           out.data().data() + i * m * n, m, k, n);
    if (rg) {
        auto an_ = a.node(), bn_ = b.node(), on_ = out.node();
        record([an_, bn_, on_, g, m, k, n] {
            if (an_->requires_grad) {
                an_->ensure_grad();
                // dA = dY * B : [m,n] x [n,k]
                for (std::size_t i = 0; i < g; ++i)
                    kernels::matmul(on_->grad.data() + i * m * n,
                                    bn_->value.data() + i * n * k,
                                    an_->grad.data() + i * m * k, m, n, k);
            }
            if (bn_->requires_grad) {
                bn_->ensure_grad();
                // dB = dY^T * A : [n,m] x [m,k]
                for (std::size_t i = 0; i < g; ++i)
                    kernels::matmul_at(on_->grad.data() + i * m * n,
                                       an_->value.data() + i * m * k,
                                       bn_->grad.data() + i * n * k, n, m, k);
            }
        });
    }
    return out;
}

// ---- structural -----------------------------------------------------------

Tensor transpose_last2(const Tensor& x) {
    const auto& xs = x.shape();
    if (xs.size() < 2) shape_error("transpose", xs, xs);
    const std::size_t m = xs[xs.size() - 2], n = xs.back();
    const std::size_t outer = x.size() / (m * n);
    Shape os(xs);
    std::swap(os[os.size() - 2], os.back());
    bool rg = want_grad({&x});
    Tensor out = make_out(os, rg);
    const auto& xv = x.data();
    auto& o = out.data();
    for (std::size_t b = 0; b < outer; ++b)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j)
                o[b * m * n + j * m + i] = xv[b * m * n + i * n + j];
    if (rg) {
        auto xn = x.node(), on = out.node();
        record([xn, on, outer, m, n] {
            xn->ensure_grad();
            for (std::size_t b = 0; b < outer; ++b)
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        xn->grad[b * m * n + i * n + j] +=
                            on->grad[b * m * n + j * m + i];
        });
    }
    return out;
}

namespace {

// index map shared by head_split and its inverse
inline std::size_t split_idx(std::size_t b, std::size_t h, std::size_t t,
                             std::size_t j, std::size_t nh, std::size_t tt,
                             std::size_t dh) {
    return ((b * nh + h) * tt + t) * dh + j;
}

}  // namespace

Tensor head_split(const Tensor& x, int n_heads) {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[2] % n_heads != 0)
        throw std::invalid_argument("head_split: shape " + shape_str(s) +
                                    " not divisible into " + std::to_string(n_heads) +
                                    " heads");
    const std::size_t b = s[0], t = s[1], d = s[2];
    const std::size_t nh = n_heads, dh = d / nh;
    bool rg = want_grad({&x});
    Tensor out = make_out({static_cast<int>(b * nh), static_cast<int>(t),
                           static_cast<int>(dh)}, rg);
    const auto& xv = x.data();
    auto& o = out.data();
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ti = 0; ti < t; ++ti)
            for (std::size_t h = 0; h < nh; ++h)
                for (std::size_t j = 0; j < dh; ++j)
                    o[split_idx(bi, h, ti, j, nh, t, dh)] =
                        xv[(bi * t + ti) * d + h * dh + j];
    if (rg) {
        auto xn = x.node(), on = out.node();
        record([xn, on, b, t, nh, dh, d] {
            xn->ensure_grad();
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t ti = 0; ti < t; ++ti)
                    for (std::size_t h = 0; h < nh; ++h)
                        for (std::size_t j = 0; j < dh; ++j)
                            xn->grad[(bi * t + ti) * d + h * dh + j] +=
                                on->grad[split_idx(bi, h, ti, j, nh, t, dh)];
        });
    }
    return out;
}

Tensor head_merge(const Tensor& x, int n_heads) {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[0] % n_heads != 0)
        throw std::invalid_argument("head_merge: shape " + shape_str(s) +
                                    " not divisible by " + std::to_string(n_heads) +
                                    " heads");
    const std::size_t nh = n_heads;
    const std::size_t b = static_cast<std::size_t>(s[0]) / nh, t = s[1], dh = s[2];
    const std::size_t d = nh * dh;
    bool rg = want_grad({&x});
    Tensor out = make_out({static_cast<int>(b), static_cast<int>(t),
                           static_cast<int>(d)}, rg);
    const auto& xv = x.data();
    auto& o = out.data();
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ti = 0; ti < t; ++ti)
            for (std::size_t h = 0; h < nh; ++h)
                for (std::size_t j = 0; j < dh; ++j)
                    o[(bi * t + ti) * d + h * dh + j] =
                        xv[split_idx(bi, h, ti, j, nh, t, dh)];
    if (rg) {
        auto xn = x.node(), on = out.node();
        record([xn, on, b, t, nh, dh, d] {
            xn->ensure_grad();
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t ti = 0; ti < t; ++ti)
                    for (std::size_t h = 0; h < nh; ++h)
                        for (std::size_t j = 0; j < dh; ++j)
                            xn->grad[split_idx(bi, h, ti, j, nh, t, dh)] +=
                                on->grad[(bi * t + ti) * d + h * dh + j];
        });
    }
    return out;
}

Tensor reshape(const Tensor& x, const Shape& new_shape) {
    check_shape(new_shape, "reshape");
    if (numel(new_shape) != x.size()) shape_error("reshape", x.shape(), new_shape);
    bool rg = want_grad({&x});
    Tensor out = make_out(new_shape, rg);
    out.data() = x.data();
    if (rg) {
        auto xn = x.node(), on = out.node();
        record([xn, on] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& s0 = xs[0].shape();
    if (axis < 0 || axis >= static_cast<int>(s0.size()))
        throw std::invalid_argument("concat: bad axis " + std::to_string(axis));
    Shape os(s0);
    os[axis] = 0;
    for (const auto& t : xs) {
        const Shape& s = t.shape();
        if (s.size() != s0.size()) shape_error("concat", s0, s);
        for (std::size_t d = 0; d < s.size(); ++d)
            if (static_cast<int>(d) != axis && s[d] != s0[d]) shape_error("concat", s0, s);
        os[axis] += s[axis];
    }
    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s0[d];
    for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];

    bool rg = false;
    for (const auto& t : xs) rg = rg || want_grad({&t});
    Tensor out = make_out(os, rg);
    auto& o = out.data();
    const std::size_t ostride = static_cast<std::size_t>(os[axis]) * inner;
    std::size_t off = 0;
    for (const auto& t : xs) {
        const std::size_t len = static_cast<std::size_t>(t.shape()[axis]) * inner;
        const auto& v = t.data();
        for (std::size_t b = 0; b < outer; ++b)
            std::copy_n(v.begin() + b * len, len, o.begin() + b * ostride + off);
        off += len;
    }
    if (rg) {
        auto on = out.node();
        std::vector<std::shared_ptr<Node>> ins;
        std::vector<std::size_t> lens;
        for (const auto& t : xs) {
            ins.push_back(t.node());
            lens.push_back(static_cast<std::size_t>(t.shape()[axis]) * inner);
        }
        record([on, ins, lens, outer, ostride] {
            std::size_t off2 = 0;
            for (std::size_t i = 0; i < ins.size(); ++i) {
                if (ins[i]->requires_grad) {
                    ins[i]->ensure_grad();
                    for (std::size_t b = 0; b < outer; ++b)
                        for (std::size_t j = 0; j < lens[i]; ++j)
                            ins[i]->grad[b * lens[i] + j] +=
                                on->grad[b * ostride + off2 + j];
                }
                off2 += lens[i];
            }
        });
    }
    return out;
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
    const Shape& s = x.shape();
    if (axis < 0 || axis >= static_cast<int>(s.size()) || start < 0 || len <= 0 ||
        start + len > s[axis])
        throw std::invalid_argument("slice: bad range [" + std::to_string(start) + "," +
                                    std::to_string(start + len) + ") on axis " +
                                    std::to_string(axis) + " of " + shape_str(s));
    std::size_t outer = 1, inner = 1;
    for (int d = 0; d < axis; ++d) outer *= s[d];
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    Shape os(s);
    os[axis] = len;
    bool rg = want_grad({&x});
    Tensor out = make_out(os, rg);
    const std::size_t istride = static_cast<std::size_t>(s[axis]) * inner;
    const std::size_t olen = static_cast<std::size_t>(len) * inner;
    const std::size_t ioff = static_cast<std::size_t>(start) * inner;
    for (std::size_t b = 0; b < outer; ++b)
        std::copy_n(x.data().begin() + b * istride + ioff, olen,
                    out.data().begin() + b * olen);
    if (rg) {
        auto xn = x.node(), on = out.node();
        record([xn, on, outer, istride, olen, ioff] {
            xn->ensure_grad();
            for (std::size_t b = 0; b < outer; ++b)
                for (std::size_t j = 0; j < olen; ++j)
                    xn->grad[b * istride + ioff + j] += on->grad[b * olen + j];
        });
    }
    return out;
}

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    const Shape& ts = table.shape();
    if (ts.size() != 2) shape_error("embedding", ts, {static_cast<int>(ids.size())});
    const int v = ts[0], d = ts[1];
    for (int id : ids)
        if (id < 0 || id >= v)
            throw std::invalid_argument("embedding: id " + std::to_string(id) +
                                        " out of vocabulary of size " + std::to_string(v));
    bool rg = want_grad({&table});
    Tensor out = make_out({static_cast<int>(ids.size()), d}, rg);
    for (std::size_t r = 0; r < ids.size(); ++r)
        std::copy_n(table.data().begin() + static_cast<std::size_t>(ids[r]) * d, d,
                    out.data().begin() + r * d);
    if (rg) {
        auto tn = table.node(), on = out.node();
        record([tn, on, ids, d] {
            tn->ensure_grad();
            for (std::size_t r = 0; r < ids.size(); ++r)
                for (int j = 0; j < d; ++j)
                    tn->grad[static_cast<std::size_t>(ids[r]) * d + j] +=
                        on->grad[r * d + j];
        });
    }
    return out;
}

// ---- nonlinearities -------------------------------------------------------

Tensor relu(const Tensor& x) {
    bool rg = want_grad({&x});
    Tensor out = make_out(x.shape(), rg);
    const auto& xv = x.data();
    auto& o = out.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    if (rg) {
        auto xn = x.node(), on = out.node();
        record([xn, on] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                if (xn->value[i] > 0.0) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

Tensor softmax_last(const Tensor& x) {
    const Shape& s = x.shape();
    const std::size_t d = s.back();
    if (d == 0) throw std::invalid_argument("softmax: axis of length 0");
    const std::size_t rows = x.size() / d;
    bool rg = want_grad({&x});
    Tensor out = make_out(s, rg);
    const auto& xv = x.data();
    auto& o = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = xv.data() + r * d;
        double* oi = o.data() + r * d;
        double mx = xi[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            oi[j] = std::exp(xi[j] - mx);
            z += oi[j];
        }
        for (std::size_t j = 0; j < d; ++j) oi[j] /= z;
    }
    if (rg) {
        auto xn = x.node(), on = out.node();
        record([xn, on, rows, d] {
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = on->value.data() + r * d;
                const double* gy = on->grad.data() + r * d;
                double dot = 0.0;
                for (std::size_t j = 0; j < d; ++j) dot += y[j] * gy[j];
                for (std::size_t j = 0; j < d; ++j)
                    xn->grad[r * d + j] += y[j] * (gy[j] - dot);
            }
        });
    }
    return out;
}

Tensor log_softmax_last(const Tensor& x) {
    const Shape& s = x.shape();
    const std::size_t d = s.back();
    if (d == 0) throw std::invalid_argument("log_softmax: axis of length 0");
    const std::size_t rows = x.size() / d;
    bool rg = want_grad({&x});
    Tensor out = make_out(s, rg);
    const auto& xv = x.data();
    auto& o = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = xv.data() + r * d;
        double* oi = o.data() + r * d;
        double mx = xi[0];
        for (std::size_t j = 1; j < d; ++j) mx = std::max(mx, xi[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < d; ++j) z += std::exp(xi[j] - mx);
        const double lz = mx + std::log(z);
        for (std::size_t j = 0; j < d; ++j) oi[j] = xi[j] - lz;
    }
    if (rg) {
        auto xn = x.node(), on = out.node();
        record([xn, on, rows, d] {
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                const double* y = on->value.data() + r * d;
                const double* gy = on->grad.data() + r * d;
                double gsum = 0.0;
                for (std::size_t j = 0; j < d; ++j) gsum += gy[j];
                for (std::size_t j = 0; j < d; ++j)
                    xn->grad[r * d + j] += gy[j] - std::exp(y[j]) * gsum;
            }
        });
    }
    return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const Shape& s = x.shape();
    const std::size_t d = s.back();
    if (gain.shape() != Shape{static_cast<int>(d)} ||
        bias.shape() != Shape{static_cast<int>(d)})
        shape_error("layer_norm", s, gain.shape());
    const std::size_t rows = x.size() / d;
    bool rg = want_grad({&x, &gain, &bias});
    Tensor out = make_out(s, rg);
    std::vector<double> xhat;
    xhat.resize(x.size());
    std::vector<double> inv_std(rows);
    const auto& xv = x.data();
    auto& o = out.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xi = xv.data() + r * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += xi[j];
        mean /= d;
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double c = xi[j] - mean;
            var += c * c;
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            xhat[r * d + j] = (xi[j] - mean) * is;
            o[r * d + j] = xhat[r * d + j] * gain.data()[j] + bias.data()[j];
        }
    }
    if (rg) {
        auto xn = x.node(), gn = gain.node(), bn = bias.node(), on = out.node();
        record([xn, gn, bn, on, rows, d, xhat = std::move(xhat),
                inv_std = std::move(inv_std)] {
            for (std::size_t r = 0; r < rows; ++r) {
                const double* gy = on->grad.data() + r * d;
                const double* xh = xhat.data() + r * d;
                if (gn->requires_grad) {
                    gn->ensure_grad();
                    for (std::size_t j = 0; j < d; ++j) gn->grad[j] += gy[j] * xh[j];
                }
                if (bn->requires_grad) {
                    bn->ensure_grad();
                    for (std::size_t j = 0; j < d; ++j) bn->grad[j] += gy[j];
                }
                if (xn->requires_grad) {
                    xn->ensure_grad();
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = gy[j] * gn->value[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= d;
                    m2 /= d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dxh = gy[j] * gn->value[j];
                        xn->grad[r * d + j] += inv_std[r] * (dxh - m1 - xh[j] * m2);
                    }
                }
            }
        });
    }
    return out;
}

// ---- reductions -----------------------------------------------------------

Tensor sum_all(const Tensor& x) {
    bool rg = want_grad({&x});
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor out = make_out({1}, rg);
    out.data()[0] = acc;
    if (rg) {
        auto xn = x.node(), on = out.node();
        record([xn, on] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[0];
        });
    }
    return out;
}

Tensor mean_all(const Tensor& x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

Tensor sum_last(const Tensor& x) {
    const Shape& s = x.shape();
    if (s.size() < 2) return sum_all(x);
    const std::size_t d = s.back();
    const std::size_t rows = x.size() / d;
    Shape os(s.begin(), s.end() - 1);
    bool rg = want_grad({&x});
    Tensor out = make_out(os, rg);
    const auto& xv = x.data();
    for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += xv[r * d + j];
        out.data()[r] = acc;
    }
    if (rg) {
        auto xn = x.node(), on = out.node();
        record([xn, on, rows, d] {
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < d; ++j) xn->grad[r * d + j] += on->grad[r];
        });
    }
    return out;
}

// ---- masking / selection --------------------------------------------------

Tensor masked_fill(const Tensor& x, const Tensor& mask, double v) {
    if (mask.size() != x.size() && !(x.shape().size() >= 1 && x.size() % mask.size() == 0))
        shape_error("masked_fill", x.shape(), mask.shape());
    bool rg = want_grad({&x});
    Tensor out = make_out(x.shape(), rg);
    const auto& xv = x.data();
    const auto& mv = mask.data();
    auto& o = out.data();
    const std::size_t mn = mv.size();
    for (std::size_t i = 0; i < o.size(); ++i)
        o[i] = mv[i % mn] != 0.0 ? xv[i] : v;
    if (rg) {
        auto xn = x.node(), mnode = mask.node(), on = out.node();
        record([xn, mnode, on, mn] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                if (mnode->value[i % mn] != 0.0) xn->grad[i] += on->grad[i];
        });
    }
    return out;
}

Tensor gather_last(const Tensor& x, const std::vector<int>& ids) {
    const Shape& s = x.shape();
    const std::size_t d = s.back();
    const std::size_t rows = x.size() / d;
    if (ids.size() != rows)
        throw std::invalid_argument("gather_last: " + std::to_string(ids.size()) +
                                    " ids for " + std::to_string(rows) + " rows of " +
                                    shape_str(s));
    for (int id : ids)
        if (id < 0 || id >= static_cast<int>(d))
            throw std::invalid_argument("gather_last: id " + std::to_string(id) +
                                        " out of range for axis " + std::to_string(d));
    Shape os(s.begin(), s.end() - 1);
    if (os.empty()) os = {1};
    bool rg = want_grad({&x});
    Tensor out = make_out(os, rg);
    for (std::size_t r = 0; r < rows; ++r)
        out.data()[r] = x.data()[r * d + ids[r]];
    if (rg) {
        auto xn = x.node(), on = out.node();
        record([xn, on, ids, rows, d] {
            xn->ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                xn->grad[r * d + ids[r]] += on->grad[r];
        });
    }
    return out;
}

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng, bool enabled) {
    if (rate < 0.0 || rate >= 1.0)
        throw std::invalid_argument("dropout: rate " + std::to_string(rate) +
                                    " outside [0,1)");
    if (!enabled || rate == 0.0) return x;
    const double keep = 1.0 - rate;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto mask = std::make_shared<std::vector<double>>(x.size());
    for (auto& m : *mask) m = u(rng) < keep ? 1.0 / keep : 0.0;
    bool rg = want_grad({&x});
    Tensor out = make_out(x.shape(), rg);
    for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = x.data()[i] * (*mask)[i];
    if (rg) {
        auto xn = x.node(), on = out.node();
        record([xn, on, mask] {
            xn->ensure_grad();
            for (std::size_t i = 0; i < on->grad.size(); ++i)
                xn->grad[i] += on->grad[i] * (*mask)[i];
        });
    }
    return out;
}

Tensor detach(const Tensor& x) {
    auto n = std::make_shared<Node>();
    n->shape = x.shape();
    n->value = x.data();
    n->requires_grad = false;
    return Tensor(n);
}

// ---- backward / checking --------------------------------------------------

void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw std::invalid_argument("backward: loss " + shape_str(loss.shape()) +
                                    " is not scalar");
    loss.node()->ensure_grad();
    loss.node()->grad[0] = 1.0;
    Tape::current().replay_backward();
}

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& point, double step, double tol) {
    if (step <= 0.0) throw std::invalid_argument("grad_check: step must be positive");
    Tensor p = Tensor::from(point.shape(), point.data(), true);
    Tensor loss = f(p);
    backward(loss);
    std::vector<double> analytic = p.grad();
    if (analytic.empty()) analytic.assign(p.size(), 0.0);

    GradCheckReport rep;
    NoGradGuard ng;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double orig = p.data()[i];
        p.data()[i] = orig + step;
        const double up = f(p).item();
        p.data()[i] = orig - step;
        const double dn = f(p).item();
        p.data()[i] = orig;
        const double numeric = (up - dn) / (2.0 * step);
        if (!std::isfinite(numeric) || !std::isfinite(analytic[i]))
            throw std::runtime_error("grad_check: non-finite value at coordinate " +
                                     std::to_string(i));
        const double denom = std::max({1.0, std::abs(numeric), std::abs(analytic[i])});
        const double err = std::abs(numeric - analytic[i]) / denom;
        if (err > rep.max_rel_err) {
            rep.max_rel_err = err;
            rep.worst_coord = i;
        }
    }
    rep.pass = rep.max_rel_err <= tol;
    return rep;
}

}  // namespace dtn::ag
