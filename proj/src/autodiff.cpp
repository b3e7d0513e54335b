#include "oscqat/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace oscqat {

const Tensor& Value::val() const {
    if (!tape || id < 0) throw std::runtime_error("Value: invalid handle");
    return tape->value(*this);
}

const Tensor& Value::grad() const {
    if (!tape || id < 0) throw std::runtime_error("Value: invalid handle");
    return tape->grad(*this);
}

Value Tape::leaf(Tensor v, bool trainable) {
    Node n;
    n.value = std::move(v);
    n.trainable = trainable;
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Value Tape::make_node(std::vector<Value> inputs, Tensor value, BackwardFn backward) {
    Node n;
    for (const Value& in : inputs) {
        if (in.tape != this) throw std::invalid_argument("Tape: input from a different tape");
        n.inputs.push_back(in.id);
    }
    n.value = std::move(value);
    n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Value{this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::grad(Value v) const {
    if (!backward_done_) throw std::runtime_error("Tape: gradient requested before backward()");
    return nodes_.at(v.id).grad;
}

Tensor& Tape::grad_buf(int id) {
    Node& n = nodes_.at(id);
    if (n.grad.size() == 0) n.grad = Tensor::zeros(n.value.shape);
    return n.grad;
}

void Tape::backward(Value root) {
    if (root.tape != this || root.id < 0 || root.id >= static_cast<int>(nodes_.size()))
        throw std::runtime_error("Tape::backward: invalid root (graph not evaluated on this tape)");

    // Mark nodes reachable from the root.
    std::vector<char> reach(nodes_.size(), 0);
    std::vector<int> stack{root.id};
    reach[root.id] = 1;
    while (!stack.empty()) {
        int u = stack.back();
        stack.pop_back();
        for (int v : nodes_[u].inputs)
            if (!reach[v]) {
                reach[v] = 1;
                stack.push_back(v);
            }
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (reach[i]) grad_buf(static_cast<int>(i));
    for (double& g : nodes_[root.id].grad.data) g = 1.0;

    // Creation order is a topological order: inputs precede consumers.
    for (int i = root.id; i >= 0; --i) {
        if (!reach[i]) continue;
        Node& n = nodes_[i];
        if (n.backward) n.backward(*this, n);
    }
    backward_done_ = true;
}

const Tensor& forward(Value root) { return root.val(); }

namespace {

Tape* common_tape(Value a, Value b) {
    if (a.tape != b.tape) throw std::invalid_argument("op: operands from different tapes");
    return a.tape;
}

}  // namespace

Value add(Value a, Value b) {
    Tape* t = common_tape(a, b);
    check_same_shape(a.val(), b.val(), "add");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.val()[i];
    return t->make_node({a, b}, std::move(out), [](Tape& tp, const Tape::Node& n) {
        Tensor& ga = tp.grad_buf(n.inputs[0]);
        Tensor& gb = tp.grad_buf(n.inputs[1]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            ga[i] += n.grad[i];
            gb[i] += n.grad[i];
        }
    });
}

Value sub(Value a, Value b) {
    Tape* t = common_tape(a, b);
    check_same_shape(a.val(), b.val(), "sub");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.val()[i];
    return t->make_node({a, b}, std::move(out), [](Tape& tp, const Tape::Node& n) {
        Tensor& ga = tp.grad_buf(n.inputs[0]);
        Tensor& gb = tp.grad_buf(n.inputs[1]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            ga[i] += n.grad[i];
            gb[i] -= n.grad[i];
        }
    });
}

Value mul(Value a, Value b) {
    Tape* t = common_tape(a, b);
    check_same_shape(a.val(), b.val(), "mul");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.val()[i];
    return t->make_node({a, b}, std::move(out), [](Tape& tp, const Tape::Node& n) {
        const Tensor& av = tp.node(n.inputs[0]).value;
        const Tensor& bv = tp.node(n.inputs[1]).value;
        Tensor& ga = tp.grad_buf(n.inputs[0]);
        Tensor& gb = tp.grad_buf(n.inputs[1]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) {
            ga[i] += n.grad[i] * bv[i];
            gb[i] += n.grad[i] * av[i];
        }
    });
}

Value mul_scalar(Value a, double c) {
    Tensor out = a.val();
    for (double& x : out.data) x *= c;
    return a.tape->make_node({a}, std::move(out), [c](Tape& tp, const Tape::Node& n) {
        Tensor& ga = tp.grad_buf(n.inputs[0]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += c * n.grad[i];
    });
}

Value add_scalar(Value a, double c) {
    Tensor out = a.val();
    for (double& x : out.data) x += c;
    return a.tape->make_node({a}, std::move(out), [](Tape& tp, const Tape::Node& n) {
        Tensor& ga = tp.grad_buf(n.inputs[0]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += n.grad[i];
    });
}

Value square(Value a) {
    Tensor out = a.val();
    for (double& x : out.data) x *= x;
    return a.tape->make_node({a}, std::move(out), [](Tape& tp, const Tape::Node& n) {
        const Tensor& av = tp.node(n.inputs[0]).value;
        Tensor& ga = tp.grad_buf(n.inputs[0]);
        for (std::size_t i = 0; i < n.grad.size(); ++i) ga[i] += 2.0 * av[i] * n.grad[i];
    });
}

Value relu(Value a) {
    Tensor out = a.val();
    for (double& x : out.data) x = std::max(x, 0.0);
    return a.tape->make_node({a}, std::move(out), [](Tape& tp, const Tape::Node& n) {
        const Tensor& av = tp.node(n.inputs[0]).value;
        Tensor& ga = tp.grad_buf(n.inputs[0]);
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (av[i] > 0.0) ga[i] += n.grad[i];
    });
}

Value relu6(Value a) {
    Tensor out = a.val();
    for (double& x : out.data) x = std::clamp(x, 0.0, 6.0);
    return a.tape->make_node({a}, std::move(out), [](Tape& tp, const Tape::Node& n) {
        const Tensor& av = tp.node(n.inputs[0]).value;
        Tensor& ga = tp.grad_buf(n.inputs[0]);
        for (std::size_t i = 0; i < n.grad.size(); ++i)
            if (av[i] > 0.0 && av[i] < 6.0) ga[i] += n.grad[i];
    });
}

Value sum(Value a) {
    double s = 0.0;
    for (double x : a.val().data) s += x;
    return a.tape->make_node({a}, Tensor::scalar(s), [](Tape& tp, const Tape::Node& n) {
        Tensor& ga = tp.grad_buf(n.inputs[0]);
        for (double& g : ga.data) g += n.grad[0];
    });
}

Value mean(Value a) {
    const std::size_t cnt = a.val().size();
    double s = 0.0;
    for (double x : a.val().data) s += x;
    return a.tape->make_node({a}, Tensor::scalar(s / cnt), [cnt](Tape& tp, const Tape::Node& n) {
        Tensor& ga = tp.grad_buf(n.inputs[0]);
        for (double& g : ga.data) g += n.grad[0] / cnt;
    });
}

Value matmul(Value a, Value b) {
    Tape* t = common_tape(a, b);
    const Tensor& av = a.val();
    const Tensor& bv = b.val();
    if (av.rank() != 2 || bv.rank() != 2 || av.shape[1] != bv.shape[0])
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(av.shape) + " vs " +
                                    shape_str(bv.shape));
    const std::size_t m = av.shape[0], k = av.shape[1], n2 = bv.shape[1];
    Tensor out = Tensor::zeros({m, n2});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            const double x = av[i * k + l];
            for (std::size_t j = 0; j < n2; ++j) out[i * n2 + j] += x * bv[l * n2 + j];
        }
    return t->make_node({a, b}, std::move(out), [m, k, n2](Tape& tp, const Tape::Node& n) {
        const Tensor& av2 = tp.node(n.inputs[0]).value;
        const Tensor& bv2 = tp.node(n.inputs[1]).value;
        Tensor& ga = tp.grad_buf(n.inputs[0]);
        Tensor& gb = tp.grad_buf(n.inputs[1]);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n2; ++j) {
                const double g = n.grad[i * n2 + j];
                for (std::size_t l = 0; l < k; ++l) {
                    ga[i * k + l] += g * bv2[l * n2 + j];
                    gb[l * n2 + j] += g * av2[i * k + l];
                }
            }
    });
}

Value linear(Value x, Value w, Value b) {
    Tape* t = common_tape(x, w);
    common_tape(x, b);
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    const Tensor& bv = b.val();
    if (xv.rank() != 2 || wv.rank() != 2 || xv.shape[1] != wv.shape[1] || bv.size() != wv.shape[0])
        throw std::invalid_argument("linear: incompatible shapes " + shape_str(xv.shape) + " vs " +
                                    shape_str(wv.shape));
    const std::size_t N = xv.shape[0], F = xv.shape[1], O = wv.shape[0];
    Tensor out = Tensor::zeros({N, O});
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t o = 0; o < O; ++o) {
            double s = bv[o];
            for (std::size_t f = 0; f < F; ++f) s += xv[i * F + f] * wv[o * F + f];
            out[i * O + o] = s;
        }
    return t->make_node({x, w, b}, std::move(out), [N, F, O](Tape& tp, const Tape::Node& n) {
        const Tensor& xv2 = tp.node(n.inputs[0]).value;
        const Tensor& wv2 = tp.node(n.inputs[1]).value;
        Tensor& gx = tp.grad_buf(n.inputs[0]);
        Tensor& gw = tp.grad_buf(n.inputs[1]);
        Tensor& gb = tp.grad_buf(n.inputs[2]);
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t o = 0; o < O; ++o) {
                const double g = n.grad[i * O + o];
                gb[o] += g;
                for (std::size_t f = 0; f < F; ++f) {
                    gx[i * F + f] += g * wv2[o * F + f];
                    gw[o * F + f] += g * xv2[i * F + f];
                }
            }
    });
}

namespace {

std::size_t conv_out_dim(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    if (in + 2 * pad < k) throw std::invalid_argument("conv: kernel larger than padded input");
    return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

Value conv2d(Value x, Value w, Value b, std::size_t stride, std::size_t pad) {
    Tape* t = common_tape(x, w);
    common_tape(x, b);
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (xv.rank() != 4 || wv.rank() != 4 || xv.shape[1] != wv.shape[1])
        throw std::invalid_argument("conv2d: incompatible shapes " + shape_str(xv.shape) + " vs " +
                                    shape_str(wv.shape));
    const std::size_t N = xv.shape[0], Ci = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    const std::size_t Co = wv.shape[0], K = wv.shape[2];
    const std::size_t Ho = conv_out_dim(H, K, stride, pad), Wo = conv_out_dim(W, K, stride, pad);
    Tensor out = Tensor::zeros({N, Co, Ho, Wo});
    const Tensor& bv = b.val();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t co = 0; co < Co; ++co)
            for (std::size_t ho = 0; ho < Ho; ++ho)
                for (std::size_t wo = 0; wo < Wo; ++wo) {
                    double s = bv[co];
                    for (std::size_t ci = 0; ci < Ci; ++ci)
                        for (std::size_t kh = 0; kh < K; ++kh)
                            for (std::size_t kw = 0; kw < K; ++kw) {
                                const long ih = static_cast<long>(ho * stride + kh) - static_cast<long>(pad);
                                const long iw = static_cast<long>(wo * stride + kw) - static_cast<long>(pad);
                                if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) ||
                                    iw >= static_cast<long>(W))
                                    continue;
                                s += xv.at4(n, ci, ih, iw) *
                                     wv.data[((co * Ci + ci) * K + kh) * K + kw];
                            }
                    out.at4(n, co, ho, wo) = s;
                }
    return t->make_node({x, w, b}, std::move(out),
                        [N, Ci, H, W, Co, K, Ho, Wo, stride, pad](Tape& tp, const Tape::Node& nd) {
        const Tensor& xv2 = tp.node(nd.inputs[0]).value;
        const Tensor& wv2 = tp.node(nd.inputs[1]).value;
        Tensor& gx = tp.grad_buf(nd.inputs[0]);
        Tensor& gw = tp.grad_buf(nd.inputs[1]);
        Tensor& gb = tp.grad_buf(nd.inputs[2]);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t co = 0; co < Co; ++co)
                for (std::size_t ho = 0; ho < Ho; ++ho)
                    for (std::size_t wo = 0; wo < Wo; ++wo) {
                        const double g = nd.grad.at4(n, co, ho, wo);
                        gb[co] += g;
                        for (std::size_t ci = 0; ci < Ci; ++ci)
                            for (std::size_t kh = 0; kh < K; ++kh)
                                for (std::size_t kw = 0; kw < K; ++kw) {
                                    const long ih =
                                        static_cast<long>(ho * stride + kh) - static_cast<long>(pad);
                                    const long iw =
                                        static_cast<long>(wo * stride + kw) - static_cast<long>(pad);
                                    if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) ||
                                        iw >= static_cast<long>(W))
                                        continue;
                                    const std::size_t widx = ((co * Ci + ci) * K + kh) * K + kw;
                                    gx.at4(n, ci, ih, iw) += g * wv2.data[widx];
                                    gw.data[widx] += g * xv2.at4(n, ci, ih, iw);
                                }
                    }
    });
}

Value depthwise_conv2d(Value x, Value w, Value b, std::size_t stride, std::size_t pad) {
    Tape* t = common_tape(x, w);
    common_tape(x, b);
    const Tensor& xv = x.val();
    const Tensor& wv = w.val();
    if (xv.rank() != 4 || wv.rank() != 3 || xv.shape[1] != wv.shape[0])
        throw std::invalid_argument("depthwise_conv2d: incompatible shapes " + shape_str(xv.shape) +
                                    " vs " + shape_str(wv.shape));
    const std::size_t N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    const std::size_t K = wv.shape[1];
    const std::size_t Ho = conv_out_dim(H, K, stride, pad), Wo = conv_out_dim(W, K, stride, pad);
    Tensor out = Tensor::zeros({N, C, Ho, Wo});
    const Tensor& bv = b.val();
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ho = 0; ho < Ho; ++ho)
                for (std::size_t wo = 0; wo < Wo; ++wo) {
                    double s = bv[c];
                    for (std::size_t kh = 0; kh < K; ++kh)
                        for (std::size_t kw = 0; kw < K; ++kw) {
                            const long ih = static_cast<long>(ho * stride + kh) - static_cast<long>(pad);
                            const long iw = static_cast<long>(wo * stride + kw) - static_cast<long>(pad);
                            if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) ||
                                iw >= static_cast<long>(W))
                                continue;
                            s += xv.at4(n, c, ih, iw) * wv.data[(c * K + kh) * K + kw];
                        }
                    out.at4(n, c, ho, wo) = s;
                }
    return t->make_node({x, w, b}, std::move(out),
                        [N, C, H, W, K, Ho, Wo, stride, pad](Tape& tp, const Tape::Node& nd) {
        const Tensor& xv2 = tp.node(nd.inputs[0]).value;
        const Tensor& wv2 = tp.node(nd.inputs[1]).value;
        Tensor& gx = tp.grad_buf(nd.inputs[0]);
        Tensor& gw = tp.grad_buf(nd.inputs[1]);
        Tensor& gb = tp.grad_buf(nd.inputs[2]);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t ho = 0; ho < Ho; ++ho)
                    for (std::size_t wo = 0; wo < Wo; ++wo) {
                        const double g = nd.grad.at4(n, c, ho, wo);
                        gb[c] += g;
                        for (std::size_t kh = 0; kh < K; ++kh)
                            for (std::size_t kw = 0; kw < K; ++kw) {
                                const long ih =
                                    static_cast<long>(ho * stride + kh) - static_cast<long>(pad);
                                const long iw =
                                    static_cast<long>(wo * stride + kw) - static_cast<long>(pad);
                                if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) ||
                                    iw >= static_cast<long>(W))
                                    continue;
                                const std::size_t widx = (c * K + kh) * K + kw;
                                gx.at4(n, c, ih, iw) += g * wv2.data[widx];
                                gw.data[widx] += g * xv2.at4(n, c, ih, iw);
                            }
                    }
    });
}

Value global_avg_pool(Value x) {
    const Tensor& xv = x.val();
    if (xv.rank() != 4) throw std::invalid_argument("global_avg_pool: expected NCHW input");
    const std::size_t N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3];
    const double inv = 1.0 / static_cast<double>(H * W);
    Tensor out = Tensor::zeros({N, C});
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t h = 0; h < H; ++h)
                for (std::size_t w = 0; w < W; ++w) s += xv.at4(n, c, h, w);
            out[n * C + c] = s * inv;
        }
    return x.tape->make_node({x}, std::move(out), [N, C, H, W, inv](Tape& tp, const Tape::Node& nd) {
        Tensor& gx = tp.grad_buf(nd.inputs[0]);
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c) {
                const double g = nd.grad[n * C + c] * inv;
                for (std::size_t h = 0; h < H; ++h)
                    for (std::size_t w = 0; w < W; ++w) gx.at4(n, c, h, w) += g;
            }
    });
}

Value flatten(Value x) {
    const Tensor& xv = x.val();
    if (xv.rank() < 2) throw std::invalid_argument("flatten: expected rank >= 2");
    Tensor out = xv;
    out.shape = {xv.shape[0], xv.size() / xv.shape[0]};
    return x.tape->make_node({x}, std::move(out), [](Tape& tp, const Tape::Node& nd) {
        Tensor& gx = tp.grad_buf(nd.inputs[0]);
        for (std::size_t i = 0; i < nd.grad.size(); ++i) gx[i] += nd.grad[i];
    });
}

Tensor softmax_rows(const Tensor& logits) {
    const std::size_t N = logits.shape[0], C = logits.shape[1];
    Tensor p = logits;
    for (std::size_t i = 0; i < N; ++i) {
        double mx = p[i * C];
        for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, p[i * C + c]);
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            p[i * C + c] = std::exp(p[i * C + c] - mx);
            z += p[i * C + c];
        }
        for (std::size_t c = 0; c < C; ++c) p[i * C + c] /= z;
    }
    return p;
}

Value softmax_cross_entropy(Value logits, const std::vector<int>& labels) {
    const Tensor& lv = logits.val();
    if (lv.rank() != 2 || lv.shape[0] != labels.size())
        throw std::invalid_argument("softmax_cross_entropy: logits " + shape_str(lv.shape) +
                                    " vs " + std::to_string(labels.size()) + " labels");
    const std::size_t N = lv.shape[0], C = lv.shape[1];
    Tensor p = softmax_rows(lv);
    double loss = 0.0;
    for (std::size_t i = 0; i < N; ++i) loss -= std::log(std::max(p[i * C + labels[i]], 1e-300));
    loss /= static_cast<double>(N);
    return logits.tape->make_node(
        {logits}, Tensor::scalar(loss), [p, labels, N, C](Tape& tp, const Tape::Node& nd) {
            Tensor& gx = tp.grad_buf(nd.inputs[0]);
            const double g = nd.grad[0] / static_cast<double>(N);
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t c = 0; c < C; ++c) {
                    double d = p[i * C + c];
                    if (static_cast<int>(c) == labels[i]) d -= 1.0;
                    gx[i * C + c] += g * d;
                }
        });
}

}  // namespace oscqat
