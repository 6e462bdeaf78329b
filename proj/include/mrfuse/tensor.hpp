#ifndef MRFUSE_TENSOR_HPP
#define MRFUSE_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "mrfuse/common.hpp"
#include "mrfuse/rng.hpp"

namespace mrfuse {

// Dense channel-first tensor. Copies are shallow (handles share storage),
// which is what the gradient tape relies on: backward closures capture
// handles and accumulate into the shared gradient buffers. Use clone() for a
// deep copy.
//
// Layout is row-major over dims, i.e. for a [C,D,H,W] volume the flat index
// is ((c*D + z)*H + y)*W + x, matching the on-disk volume payload order.
template <typename T>
class Tensor {
public:
    Tensor() : d_(std::make_shared<Data>()) {}

    explicit Tensor(std::vector<int64_t> dims, T fill = T(0)) : d_(std::make_shared<Data>()) {
        require(!dims.empty(), "Tensor: rank-0 not supported");
        int64_t n = 1;
        for (int64_t d : dims) {
            require(d >= 1, "Tensor: all dims must be >= 1, got " + shape_str(dims));
            n *= d;
        }
        d_->dims = std::move(dims);
        d_->values.assign(static_cast<size_t>(n), fill);
    }

    static Tensor zeros(std::vector<int64_t> dims) { return Tensor(std::move(dims)); }

    static Tensor full(std::vector<int64_t> dims, T value) { return Tensor(std::move(dims), value); }

    static Tensor scalar(T value) { return Tensor({1}, value); }

    static Tensor from_values(std::vector<int64_t> dims, std::vector<T> values) {
        Tensor t(std::move(dims));
        require(values.size() == t.values_vec().size(),
                "Tensor::from_values: value count does not match shape");
        t.d_->values = std::move(values);
        return t;
    }

    // iid U(-bound, bound); draw order is flat index order.
    static Tensor uniform(std::vector<int64_t> dims, T bound, Rng& rng) {
        Tensor t(std::move(dims));
        for (auto& v : t.d_->values) v = static_cast<T>(rng.uniform(-double(bound), double(bound)));
        return t;
    }

    const std::vector<int64_t>& dims() const { return d_->dims; }
    int64_t dim(size_t i) const { return d_->dims.at(i); }
    size_t rank() const { return d_->dims.size(); }
    int64_t size() const { return static_cast<int64_t>(d_->values.size()); }

    T* data() { return d_->values.data(); }
    const T* data() const { return d_->values.data(); }
    std::vector<T>& values_vec() { return d_->values; }
    const std::vector<T>& values_vec() const { return d_->values; }

    T& operator[](int64_t i) { return d_->values[static_cast<size_t>(i)]; }
    const T& operator[](int64_t i) const { return d_->values[static_cast<size_t>(i)]; }

    // [C,D,H,W] indexing.
    T& at(int64_t c, int64_t z, int64_t y, int64_t x) {
        return d_->values[static_cast<size_t>(((c * d_->dims[1] + z) * d_->dims[2] + y) * d_->dims[3] + x)];
    }
    const T& at(int64_t c, int64_t z, int64_t y, int64_t x) const {
        return const_cast<Tensor*>(this)->at(c, z, y, x);
    }

    // [O,I,kd,kh,kw] kernel indexing.
    T& at5(int64_t o, int64_t i, int64_t a, int64_t b, int64_t c) {
        const auto& s = d_->dims;
        return d_->values[static_cast<size_t>((((o * s[1] + i) * s[2] + a) * s[3] + b) * s[4] + c)];
    }
    const T& at5(int64_t o, int64_t i, int64_t a, int64_t b, int64_t c) const {
        return const_cast<Tensor*>(this)->at5(o, i, a, b, c);
    }

    bool same_shape(const Tensor& other) const { return d_->dims == other.d_->dims; }

    bool requires_grad() const { return d_->requires_grad; }
    void set_requires_grad(bool v) { d_->requires_grad = v; }

    // Gradient buffer, allocated (zeroed) on first access. Shared across
    // handle copies like the values are.
    std::vector<T>& grad() {
        if (d_->grad.size() != d_->values.size()) d_->grad.assign(d_->values.size(), T(0));
        return d_->grad;
    }
    const std::vector<T>& grad() const { return const_cast<Tensor*>(this)->grad(); }
    bool has_grad() const { return d_->grad.size() == d_->values.size(); }
    void zero_grad() {
        if (has_grad()) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
    }

    Tensor clone() const {
        Tensor t;
        t.d_->dims = d_->dims;
        t.d_->values = d_->values;
        t.d_->requires_grad = d_->requires_grad;
        return t;
    }

    bool shares_storage(const Tensor& other) const { return d_ == other.d_; }

    bool all_finite() const {
        for (const T& v : d_->values)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

private:
    struct Data {
        std::vector<int64_t> dims;
        std::vector<T> values;
        std::vector<T> grad;
        bool requires_grad = false;
    };
    std::shared_ptr<Data> d_;
};

// Reverse-mode gradient tape. Operations append backward closures while a
// tape is active (see TapeScope); backward() replays them in reverse and is
// one-shot: the tape is consumed afterwards and double-backward is rejected.
template <typename T>
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active() { return active_; }

    void record(std::function<void()> backward_fn) { nodes_.push_back(std::move(backward_fn)); }

    size_t node_count() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

    void backward(Tensor<T>& loss) {
        require(!consumed_, "Tape::backward: tape already consumed");
        require(loss.size() == 1, "Tape::backward: loss must be a scalar (1 element), got shape " +
                                      shape_str(loss.dims()));
        loss.grad()[0] = T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
        nodes_.clear();
        consumed_ = true;
    }

private:
    template <typename U>
    friend class TapeScope;

    inline static thread_local Tape* active_ = nullptr;
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
};

// Activates a tape for the current scope. Ops record only while some tape is
// active, so inference and finite-difference probes run tape-free.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::active_) { Tape<T>::active_ = &tape; }
    ~TapeScope() { Tape<T>::active_ = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

} // namespace mrfuse

#endif
