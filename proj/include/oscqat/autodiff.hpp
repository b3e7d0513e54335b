#pragma once

#include <functional>
#include <vector>

#include "oscqat/tensor.hpp"

namespace oscqat {

class Tape;

// Handle to a node on a tape.
struct Value {
    Tape* tape = nullptr;
    int id = -1;

    const Tensor& val() const;
    const Tensor& grad() const;
};

// Reverse-mode tape. Node values are computed eagerly at construction time;
// backward() walks the graph once in reverse creation order, so inputs are
// always processed after their consumers. Gradients from multiple consumers
// accumulate by summation.
class Tape {
  public:
    struct Node;
    // Reads node.grad and accumulates into the gradients of its inputs.
    using BackwardFn = std::function<void(Tape&, const Node&)>;

    struct Node {
        std::vector<int> inputs;
        Tensor value;
        Tensor grad;  // allocated during backward
        bool trainable = false;
        BackwardFn backward;
    };

    Value leaf(Tensor v, bool trainable = false);
    Value make_node(std::vector<Value> inputs, Tensor value, BackwardFn backward);

    const Tensor& value(Value v) const { return nodes_.at(v.id).value; }
    const Tensor& grad(Value v) const;
    Tensor& grad_buf(int id);

    // Seeds d(root)/d(root) = 1 and propagates to every reachable node.
    void backward(Value root);

    std::size_t num_nodes() const { return nodes_.size(); }
    const Node& node(int id) const { return nodes_.at(id); }

  private:
    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

// Eager evaluation means the forward value already exists; this simply
// returns it (and validates the handle).
const Tensor& forward(Value root);

// --- elementwise and reduction ops ---
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value mul_scalar(Value a, double c);
Value add_scalar(Value a, double c);
Value square(Value a);
Value relu(Value a);
Value relu6(Value a);
Value sum(Value a);
Value mean(Value a);

// --- linear algebra / layers ---
Value matmul(Value a, Value b);                       // [m,k] x [k,n]
Value linear(Value x, Value w, Value b);              // x:[N,F] w:[O,F] b:[O]
Value conv2d(Value x, Value w, Value b, std::size_t stride, std::size_t pad);
// w:[C,k,k], one filter per channel
Value depthwise_conv2d(Value x, Value w, Value b, std::size_t stride, std::size_t pad);
Value global_avg_pool(Value x);                       // [N,C,H,W] -> [N,C]
Value flatten(Value x);                               // [N,...] -> [N,rest]

// Mean over the batch of -log softmax(logits)[label].
Value softmax_cross_entropy(Value logits, const std::vector<int>& labels);
Tensor softmax_rows(const Tensor& logits);

}  // namespace oscqat
