#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kpu/common.hpp"

namespace kpu {

template <typename T>
class Tape;

template <typename T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad; // empty until a gradient is accumulated
    bool requires_grad = false;
    const Tape<T>* producer = nullptr; // tape that recorded this tensor, null for leaves
};

/// Shared handle to a dense row-major array. Copies alias the same storage.
template <typename T>
class Tensor {
public:
    using value_type = T;

    Tensor() = default;
    Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, T value, bool requires_grad = false);
    static Tensor scalar(T value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t size() const { return node_->data.size(); }

    std::span<const T> data() const { return node_->data; }
    std::span<T> mutable_data() { return node_->data; }
    T item() const;
    T operator[](std::size_t i) const { return node_->data[i]; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on);
    bool is_leaf() const { return node_->producer == nullptr; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad; }
    /// Allocates (if needed) and zero-fills the gradient buffer.
    void zero_grad();
    void clear_grad() { node_->grad.clear(); }

    /// Copy of the values, cut from any tape.
    Tensor detach() const;
    /// Deep copy including requires_grad flag (no grad, no tape link).
    Tensor clone() const;

    const std::shared_ptr<TensorNode<T>>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

private:
    std::shared_ptr<TensorNode<T>> node_;
};

/// Append-only record of operations; backward walks it once in reverse.
template <typename T>
class Tape {
public:
    struct Record {
        const char* op;
        std::vector<std::shared_ptr<TensorNode<T>>> inputs;
        std::shared_ptr<TensorNode<T>> output;
        std::function<void(const Record&)> backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(Record rec);
    void backward(const Tensor<T>& root);
    void reset();

    std::size_t size() const { return records_.size(); }
    bool consumed() const { return consumed_; }

private:
    std::vector<Record> records_;
    bool consumed_ = false;
};

template <typename T>
Tape<T>* active_tape();

/// Makes `tape` the recording target for ops on this thread until destruction.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* previous_;
};

/// Suspends recording (teacher forwards, evaluation).
template <typename T>
class NoTapeScope {
public:
    NoTapeScope();
    ~NoTapeScope();
    NoTapeScope(const NoTapeScope&) = delete;
    NoTapeScope& operator=(const NoTapeScope&) = delete;

private:
    Tape<T>* previous_;
};

/// Adds `g` into node->grad (allocating), skipped for nodes that do not require grad.
template <typename T>
inline void accumulate_grad(TensorNode<T>& node, std::size_t i, T g) {
    if (!node.requires_grad) return;
    if (node.grad.empty()) node.grad.assign(node.data.size(), T(0));
    node.grad[i] += g;
}

template <typename T>
inline T* grad_buffer(TensorNode<T>& node) {
    if (!node.requires_grad) return nullptr;
    if (node.grad.empty()) node.grad.assign(node.data.size(), T(0));
    return node.grad.data();
}

// NaN/Inf guard on op inputs. On by default in debug builds.
void set_nonfinite_guard(bool on);
bool nonfinite_guard();

// Test fixture hook: flips the sign of the named op's backward rule.
void set_injected_fault(std::string op);
bool fault_injected(std::string_view op);

template <typename T>
using NamedTensor = std::pair<std::string, Tensor<T>>;

template <typename T>
using NamedTensors = std::vector<NamedTensor<T>>;

/// FNV-1a over the raw bytes of each tensor, in order.
template <typename T>
std::uint64_t hash_tensors(const NamedTensors<T>& tensors);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;
extern template class TapeScope<float>;
extern template class TapeScope<double>;
extern template class NoTapeScope<float>;
extern template class NoTapeScope<double>;

} // namespace kpu
