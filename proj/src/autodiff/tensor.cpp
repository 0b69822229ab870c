#include "kpu/autodiff/tensor.hpp"

#include <atomic>
#include <cstdio>
#include <mutex>
#include <numeric>
#include <sstream>

namespace kpu {

std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

namespace {

#ifdef NDEBUG
std::atomic<bool> g_guard{false};
#else
std::atomic<bool> g_guard{true};
#endif

std::mutex g_fault_mutex;
std::string g_fault;

template <typename T>
thread_local Tape<T>* t_active = nullptr;

} // namespace

void set_nonfinite_guard(bool on) { g_guard = on; }
bool nonfinite_guard() { return g_guard; }

void set_injected_fault(std::string op) {
    std::lock_guard lock(g_fault_mutex);
    g_fault = std::move(op);
}

bool fault_injected(std::string_view op) {
    std::lock_guard lock(g_fault_mutex);
    return !g_fault.empty() && g_fault == op;
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad)
    : node_(std::make_shared<TensorNode<T>>()) {
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeError("tensor: zero-sized dimension in " + to_string(shape));
    }
    if (data.size() != numel(shape)) {
        throw ShapeError("tensor: data length " + std::to_string(data.size()) +
                         " does not match shape " + to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
    return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
    return Tensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <typename T>
T Tensor<T>::item() const {
    if (size() != 1) throw ShapeError("item: tensor is not a scalar, shape " + to_string(shape()));
    return node_->data[0];
}

template <typename T>
void Tensor<T>::set_requires_grad(bool on) {
    node_->requires_grad = on;
    if (!on) node_->grad.clear();
}

template <typename T>
void Tensor<T>::zero_grad() {
    if (!node_->requires_grad) return;
    node_->grad.assign(node_->data.size(), T(0));
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
    return Tensor(node_->shape, node_->data, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
    return Tensor(node_->shape, node_->data, node_->requires_grad);
}

template <typename T>
void Tape<T>::record(Record rec) {
    if (consumed_) throw Error("tape: recording on a consumed tape; call reset() first");
    rec.output->producer = this;
    records_.push_back(std::move(rec));
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& root) {
    if (consumed_) throw Error("backward: tape already consumed; reset() before a second backward");
    if (root.size() != 1) throw ShapeError("backward: root must be scalar, got " + to_string(root.shape()));
    if (root.node()->producer != this) throw Error("backward: root was not produced on this tape");
    consumed_ = true;

    root.node()->grad.assign(1, T(1));
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
        const Record& rec = *it;
        if (rec.output->grad.empty()) continue; // not on a path to root
        rec.backward(rec);
    }
    // Free interior gradients; leaves keep theirs.
    for (auto& rec : records_) {
        rec.output->grad.clear();
        rec.output->grad.shrink_to_fit();
    }
}

template <typename T>
void Tape<T>::reset() {
    for (auto& rec : records_) rec.output->producer = nullptr;
    records_.clear();
    consumed_ = false;
}

template <typename T>
Tape<T>* active_tape() {
    return t_active<T>;
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(t_active<T>) {
    t_active<T> = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
    t_active<T> = previous_;
}

template <typename T>
NoTapeScope<T>::NoTapeScope() : previous_(t_active<T>) {
    t_active<T> = nullptr;
}

template <typename T>
NoTapeScope<T>::~NoTapeScope() {
    t_active<T> = previous_;
}

template <typename T>
std::uint64_t hash_tensors(const NamedTensors<T>& tensors) {
    std::uint64_t h = kFnvOffset;
    for (const auto& [name, t] : tensors) {
        h = fnv1a(std::as_bytes(t.data()), h);
    }
    return h;
}

template class Tensor<float>;
template class Tensor<double>;
template class Tape<float>;
template class Tape<double>;
template class TapeScope<float>;
template class TapeScope<double>;
template class NoTapeScope<float>;
template class NoTapeScope<double>;
template Tape<float>* active_tape<float>();
template Tape<double>* active_tape<double>();
template std::uint64_t hash_tensors(const NamedTensors<float>&);
template std::uint64_t hash_tensors(const NamedTensors<double>&);

} // namespace kpu
