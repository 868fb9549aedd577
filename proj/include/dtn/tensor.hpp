#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <vector>

// Reverse-mode autodiff over dense 64-bit float tensors. Operations record
// backward closures on a thread-local tape; backward() replays the tape in
// reverse and accumulates gradients additively. Callers zero grads between
// steps.
namespace dtn::ag {

using Shape = std::vector<int>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated on first accumulation
    bool requires_grad = false;

    void ensure_grad();
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

    static Tensor zeros(const Shape& shape, bool requires_grad = false);
    static Tensor full(const Shape& shape, double v, bool requires_grad = false);
    static Tensor from(const Shape& shape, std::vector<double> data,
                       bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);

    bool defined() const { return n_ != nullptr; }
    const Shape& shape() const { return n_->shape; }
    std::size_t size() const { return n_->value.size(); }
    std::vector<double>& data() { return n_->value; }
    const std::vector<double>& data() const { return n_->value; }
    std::vector<double>& grad() { return n_->grad; }
    const std::vector<double>& grad() const { return n_->grad; }
    bool requires_grad() const { return n_->requires_grad; }
    void set_requires_grad(bool rg) { n_->requires_grad = rg; }
    double item() const;
    void zero_grad();

    std::shared_ptr<Node> node() const { return n_; }

private:
    std::shared_ptr<Node> n_;
};

// ---- tape -----------------------------------------------------------------

class Tape {
public:
    void record(std::function<void()> backward_fn);
    std::size_t size() const { return ops_.size(); }
    void clear() { ops_.clear(); }
    // runs ops in reverse order and clears the tape
    void replay_backward();

    static Tape& current();  // thread-local

private:
    std::vector<std::function<void()>> ops_;
};

bool grad_recording_enabled();

// Disables tape recording in scope (teacher passes, decoding).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

// ---- primitives -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);  // same shape, or b a suffix (bias) or scalar
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // same shape or scalar b
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

// x [..., K] times W [K, N] -> [..., N]
Tensor linear(const Tensor& x, const Tensor& w);
// [G, M, K] x [G, K, N] -> [G, M, N]
Tensor bmm(const Tensor& a, const Tensor& b);
// [G, M, K] x [G, N, K] -> [G, M, N]
Tensor bmm_bt(const Tensor& a, const Tensor& b);
// 2-D only
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor transpose_last2(const Tensor& x);
// [B, T, H*dh] -> [B*H, T, dh] and back; used to batch attention heads
Tensor head_split(const Tensor& x, int n_heads);
Tensor head_merge(const Tensor& x, int n_heads);
Tensor reshape(const Tensor& x, const Shape& new_shape);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);

// table [V, D], one output row per id
Tensor embedding(const Tensor& table, const std::vector<int>& ids);

Tensor relu(const Tensor& x);
Tensor softmax_last(const Tensor& x);
Tensor log_softmax_last(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-6);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor sum_last(const Tensor& x);  // [..., D] -> [...]

// fills positions where mask == 0 with v; mask is a plain value tensor
Tensor masked_fill(const Tensor& x, const Tensor& mask, double v);
// x [..., V], picks x[..., ids[i]] -> [...]
Tensor gather_last(const Tensor& x, const std::vector<int>& ids);

Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng, bool enabled);

// detached copy sharing no autograd state
Tensor detach(const Tensor& x);

// ---- backward / checking --------------------------------------------------

// loss must be scalar; consumes the tape
void backward(const Tensor& loss);

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::size_t worst_coord = 0;
    bool pass = false;
};

// f maps a point to a scalar tensor; compares analytic grads against
// central differences at the given step size
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& f,
                           const Tensor& point, double step, double tol);

}  // namespace dtn::ag
