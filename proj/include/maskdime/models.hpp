#pragma once

// The three networks: noise predictor, target classifier and the frozen
// random feature net. Parameters live in a flat named list so they map
// one-to-one onto checkpoint entries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "maskdime/diffusion.hpp"
#include "maskdime/error.hpp"
#include "maskdime/ndgrad.hpp"
#include "maskdime/persist.hpp"
#include "maskdime/rng.hpp"
#include "maskdime/tensor.hpp"

namespace maskdime {

using ndgrad::Tape;
using ndgrad::Var;

class ParamSet {
public:
    void add(std::string name, Tensor t) {
        index_.push_back(std::move(name));
        values_.push_back(std::move(t));
    }
    std::size_t size() const { return values_.size(); }
    const std::string& name(std::size_t i) const { return index_[i]; }
    Tensor& operator[](std::size_t i) { return values_[i]; }
    const Tensor& operator[](std::size_t i) const { return values_[i]; }
    std::vector<Tensor>& values() { return values_; }
    const std::vector<Tensor>& values() const { return values_; }

    std::size_t find(const std::string& name) const {
        for (std::size_t i = 0; i < index_.size(); ++i)
            if (index_[i] == name) return i;
        throw ArgumentError("no parameter named " + name);
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const Tensor& t : values_) n += t.numel();
        return n;
    }

    /// Puts every parameter on the tape, as variables or constants.
    std::vector<Var> bind(Tape& tape, bool trainable) const {
        std::vector<Var> out;
        out.reserve(values_.size());
        for (const Tensor& t : values_) out.push_back(trainable ? tape.variable(t) : tape.constant(t));
        return out;
    }

    persist::Checkpoint to_checkpoint(const std::string& kind) const {
        persist::Checkpoint ck{kind, {}};
        for (std::size_t i = 0; i < values_.size(); ++i) ck.params.emplace_back(index_[i], values_[i]);
        return ck;
    }

    /// Copies values from a checkpoint, which must match names and shapes exactly.
    void load(const persist::Checkpoint& ck, const std::string& kind) {
        if (ck.kind != kind) throw FormatError("model_kind", "checkpoint holds '" + ck.kind + "', expected '" + kind + "'");
        if (ck.params.size() != values_.size())
            throw ShapeError("checkpoint for " + kind + " has " + std::to_string(ck.params.size()) +
                             " parameters, model has " + std::to_string(values_.size()));
        for (std::size_t i = 0; i < values_.size(); ++i) {
            const Tensor& t = ck.at(index_[i]);
            if (t.shape() != values_[i].shape())
                throw ShapeError("parameter " + index_[i] + " has shape " + to_string(t.shape()) + ", model expects " +
                                 to_string(values_[i].shape()));
            values_[i] = t;
        }
    }

private:
    std::vector<std::string> index_;
    std::vector<Tensor> values_;
};

namespace nets {

inline Tensor he_normal(RngStream& rng, Shape shape, int fan_in, double gain = 1.0) {
    Tensor t = rng.normal_tensor(std::move(shape));
    const float sd = static_cast<float>(gain * std::sqrt(2.0 / fan_in));
    for (float& v : t.vec()) v *= sd;
    return t;
}

/// Adds "<name>.w" [co, ci, k, k] and "<name>.b" [co].
inline void add_conv(ParamSet& p, RngStream& root, const std::string& name, int ci, int co, int k, double gain = 1.0) {
    RngStream r = root.substream({p.size()});
    p.add(name + ".w", he_normal(r, {co, ci, k, k}, ci * k * k, gain));
    p.add(name + ".b", Tensor({co}));
}

inline void add_dense(ParamSet& p, RngStream& root, const std::string& name, int in, int out, double gain = 1.0) {
    RngStream r = root.substream({p.size()});
    p.add(name + ".w", he_normal(r, {out, in}, in, gain));
    p.add(name + ".b", Tensor({out}));
}

/// Resolves "<name>.w"/"<name>.b" to bound variables in declaration order.
class Layers {
public:
    Layers(const ParamSet& p, const std::vector<Var>& v) : p_(p), v_(v) {}
    Var w(const std::string& name) const { return v_[p_.find(name + ".w")]; }
    Var b(const std::string& name) const { return v_[p_.find(name + ".b")]; }
    Var conv(Var x, const std::string& name, int stride = 1) const {
        return ndgrad::conv2d(x, w(name), b(name), stride);
    }
    Var dense(Var x, const std::string& name) const { return ndgrad::linear(x, w(name), b(name)); }

private:
    const ParamSet& p_;
    const std::vector<Var>& v_;
};

inline int batch_of(const Tensor& x) {
    if (x.rank() == 3) return 1;
    if (x.rank() == 4) return x.dim(0);
    throw ShapeError("expected an image [1,H,W] or batch [N,1,H,W], got " + to_string(x.shape()));
}

/// [1,H,W] -> [1,1,H,W]; batches pass through.
inline Tensor as_batch(const Tensor& x) {
    if (x.rank() == 3) return x.reshaped({1, x.dim(0), x.dim(1), x.dim(2)});
    batch_of(x);
    return x;
}

/// Applies a row-producing inference function to a batch in slices of at
/// most `chunk` images to bound activation memory. Output is [N, ...].
template <class F>
Tensor in_chunks(const Tensor& x, int chunk, F f) {
    const Tensor xb = as_batch(x);
    const int n = xb.dim(0);
    if (n <= chunk) return f(xb);
    const std::size_t plane = xb.numel() / static_cast<std::size_t>(n);
    Tensor out;
    std::size_t row = 0;
    for (int from = 0; from < n; from += chunk) {
        const int count = std::min(chunk, n - from);
        Shape s = xb.shape();
        s[0] = count;
        Tensor part(s, std::vector<float>(xb.data() + from * plane, xb.data() + (from + count) * plane));
        Tensor y = f(part);
        if (out.empty()) {
            Shape os = y.shape();
            os[0] = n;
            out = Tensor(os);
            row = y.numel() / static_cast<std::size_t>(count);
        }
        std::copy(y.vec().begin(), y.vec().end(), out.data() + static_cast<std::size_t>(from) * row);
    }
    return out;
}

}  // namespace nets

/// Standard sinusoidal timestep embedding, [N, dim].
inline Tensor timestep_embedding(const std::vector<int>& t, int dim = 64) {
    const int half = dim / 2;
    Tensor e({static_cast<int>(t.size()), dim});
    for (std::size_t n = 0; n < t.size(); ++n)
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            e[n * dim + i] = static_cast<float>(std::sin(t[n] * freq));
            e[n * dim + half + i] = static_cast<float>(std::cos(t[n] * freq));
        }
    return e;
}

// ---------------------------------------------------------------------------

/// Small U-net: 32x32 -> 16x16 -> 8x8 and back with skip connections. The
/// timestep embedding enters every level as a per-channel bias.
class EpsilonNet {
public:
    static constexpr const char* kKind = "epsilon_net";
    static constexpr int kEmbed = 64;

    explicit EpsilonNet(std::uint64_t seed = 0) {
        RngStream r = RngStream(seed).substream({tag(StreamTag::weights), 1});
        using nets::add_conv, nets::add_dense;
        add_dense(params, r, "emb", kEmbed, kEmbed);
        add_conv(params, r, "in", 1, 32, 3);
        add_dense(params, r, "t0", kEmbed, 32, 0.1);
        add_conv(params, r, "block0", 32, 32, 3);
        add_conv(params, r, "down1", 32, 64, 3);
        add_dense(params, r, "t1", kEmbed, 64, 0.1);
        add_conv(params, r, "down2", 64, 64, 3);
        add_dense(params, r, "t2", kEmbed, 64, 0.1);
        add_conv(params, r, "mid", 64, 64, 3);
        add_conv(params, r, "up1", 128, 32, 3);
        add_dense(params, r, "t3", kEmbed, 32, 0.1);
        add_conv(params, r, "up0", 64, 32, 3);
        add_dense(params, r, "t4", kEmbed, 32, 0.1);
        add_conv(params, r, "out", 32, 1, 3);
        // Zero output layer: the untrained net predicts eps = 0.
        params[params.find("out.w")] = Tensor::zeros_like(params[params.find("out.w")]);
    }

    Var forward(Tape& tape, const std::vector<Var>& pv, Var z, const std::vector<int>& t) const {
        using namespace ndgrad;
        if (static_cast<int>(t.size()) != z.value().dim(0)) throw ShapeError("one timestep per batch element required");
        const nets::Layers L(params, pv);
        Var e = relu(L.dense(tape.constant(timestep_embedding(t, kEmbed)), "emb"));
        auto level = [&](Var h, const char* tname) { return relu(add_channel_bias(h, L.dense(e, tname))); };
        Var h0 = level(L.conv(z, "in"), "t0");
        h0 = relu(L.conv(h0, "block0"));
        Var h1 = level(L.conv(h0, "down1", 2), "t1");
        Var h2 = level(L.conv(h1, "down2", 2), "t2");
        h2 = relu(L.conv(h2, "mid"));
        Var d1 = level(L.conv(concat_channels(upsample2x(h2), h1), "up1"), "t3");
        Var d0 = level(L.conv(concat_channels(upsample2x(d1), h0), "up0"), "t4");
        return L.conv(d0, "out");
    }

    /// Inference for one image or a batch, all at the same t.
    Tensor predict(const Tensor& z, int t) const {
        Tape tape(false);
        const Tensor zb = nets::as_batch(z);
        const std::vector<int> ts(static_cast<std::size_t>(zb.dim(0)), t);
        return forward(tape, params.bind(tape, false), tape.constant(zb), ts).value().reshaped(z.shape());
    }

    EpsFn as_fn() const {
        return [this](const Tensor& z, int t) { return predict(z, t); };
    }

    ParamSet params;
    double final_loss = 0.0;
};

// ---------------------------------------------------------------------------

/// Three conv-relu-pool blocks and a dense head. The penultimate 64-d
/// activation is exposed as the classifier's feature vector.
class Classifier {
public:
    static constexpr const char* kKind = "classifier";
    static constexpr int kFeatures = 64;

    explicit Classifier(std::uint64_t seed = 0) {
        RngStream r = RngStream(seed).substream({tag(StreamTag::weights), 2});
        using nets::add_conv, nets::add_dense;
        add_conv(params, r, "c1", 1, 16, 3);
        add_conv(params, r, "c2", 16, 32, 3);
        add_conv(params, r, "c3", 32, 64, 3);
        add_dense(params, r, "fc", 64 * 4 * 4, kFeatures);
        add_dense(params, r, "head", kFeatures, 2);
    }

    struct Outputs {
        Var features;  // [N, 64]
        Var logits;    // [N, 2]
    };

    Outputs forward(Tape&, const std::vector<Var>& pv, Var x) const {
        using namespace ndgrad;
        const nets::Layers L(params, pv);
        const int n = x.value().dim(0);
        Var h = avg_pool2d(relu(L.conv(x, "c1")), 2);
        h = avg_pool2d(relu(L.conv(h, "c2")), 2);
        h = avg_pool2d(relu(L.conv(h, "c3")), 2);
        Var f = relu(L.dense(reshape(h, {n, 64 * 4 * 4}), "fc"));
        return {f, L.dense(f, "head")};
    }

    /// Softmax probabilities [N, 2].
    Tensor probs(const Tensor& x) const {
        return nets::in_chunks(x, 256, [&](const Tensor& xb) {
            Tape tape(false);
            return ndgrad::softmax(forward(tape, params.bind(tape, false), tape.constant(xb)).logits).value();
        });
    }

    float class_prob(const Tensor& x, int y) const {
        if (y < 0 || y > 1) throw ArgumentError("class index must be 0 or 1");
        if (nets::batch_of(x) != 1) throw ShapeError("class_prob takes a single image");
        return probs(x)[static_cast<std::size_t>(y)];
    }

    int predict(const Tensor& x) const {
        const Tensor p = probs(x);
        return p[1] > p[0] ? 1 : 0;
    }

    Tensor features(const Tensor& x) const {
        return nets::in_chunks(x, 256, [&](const Tensor& xb) {
            Tape tape(false);
            return forward(tape, params.bind(tape, false), tape.constant(xb)).features.value();
        });
    }

    ParamSet params;
    double final_loss = 0.0;
};

// ---------------------------------------------------------------------------

/// Frozen random conv net used for the perceptual loss and the proxy metrics.
/// Two conv-relu-pool blocks (5x5 kernels, stride-2 first conv) down to
/// 8 x 4 x 4 = 128 features.
class FeatureNet {
public:
    static constexpr const char* kKind = "feature_net";
    static constexpr int kDim = 128;

    explicit FeatureNet(std::uint64_t seed = 0) {
        RngStream r = RngStream(seed).substream({tag(StreamTag::weights), 3});
        nets::add_conv(params, r, "f1", 1, 16, 5);
        nets::add_conv(params, r, "f2", 16, 8, 5);
        // The second layer sees nonnegative inputs; zero-sum filters keep a
        // channel from being on (or off) for every image.
        Tensor& w = params[params.find("f2.w")];
        const std::size_t fan = w.numel() / 8;
        for (std::size_t o = 0; o < 8; ++o) {
            double m = 0;
            for (std::size_t i = 0; i < fan; ++i) m += w[o * fan + i];
            m /= static_cast<double>(fan);
            for (std::size_t i = 0; i < fan; ++i) w[o * fan + i] = static_cast<float>(w[o * fan + i] - m);
        }
    }

    Var forward(Tape&, const std::vector<Var>& pv, Var x) const {
        using namespace ndgrad;
        const nets::Layers L(params, pv);
        const int n = x.value().dim(0);
        Var h = avg_pool2d(relu(L.conv(x, "f1", 2)), 2);
        h = avg_pool2d(relu(L.conv(h, "f2")), 2);
        return reshape(h, {n, kDim});
    }

    Tensor features(const Tensor& x) const {
        return nets::in_chunks(x, 256, [&](const Tensor& xb) {
            Tape tape(false);
            return forward(tape, params.bind(tape, false), tape.constant(xb)).value();
        });
    }

    ParamSet params;
};

inline double cosine(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "cosine");
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
    }
    if (aa == 0.0 || bb == 0.0) throw NumericError("cosine of a zero-norm feature vector");
    return ab / std::sqrt(aa * bb);
}

// ---------------------------------------------------------------------------
// Optimizers

class Adam {
public:
    explicit Adam(double lr, double b1 = 0.9, double b2 = 0.999, double eps = 1e-8) : lr_(lr), b1_(b1), b2_(b2), eps_(eps) {}

    void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
        if (m_.empty())
            for (const Tensor& p : params) {
                m_.push_back(Tensor::zeros_like(p));
                v_.push_back(Tensor::zeros_like(p));
            }
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, t_), c2 = 1.0 - std::pow(b2_, t_);
        for (std::size_t k = 0; k < params.size(); ++k) {
            Tensor &p = params[k], &m = m_[k], &v = v_[k];
            const Tensor& g = grads[k];
            for (std::size_t i = 0; i < p.numel(); ++i) {
                m[i] = static_cast<float>(b1_ * m[i] + (1 - b1_) * g[i]);
                v[i] = static_cast<float>(b2_ * v[i] + (1 - b2_) * g[i] * g[i]);
                p[i] -= static_cast<float>(lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_));
            }
        }
    }

    void set_lr(double lr) { lr_ = lr; }

private:
    double lr_, b1_, b2_, eps_;
    int t_ = 0;
    std::vector<Tensor> m_, v_;
};

class SgdMomentum {
public:
    SgdMomentum(double lr, double momentum = 0.9, double weight_decay = 0.0) : lr_(lr), mu_(momentum), wd_(weight_decay) {}

    void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
        if (vel_.empty())
            for (const Tensor& p : params) vel_.push_back(Tensor::zeros_like(p));
        for (std::size_t k = 0; k < params.size(); ++k)
            for (std::size_t i = 0; i < params[k].numel(); ++i) {
                vel_[k][i] = static_cast<float>(mu_ * vel_[k][i] + grads[k][i] + wd_ * params[k][i]);
                params[k][i] -= static_cast<float>(lr_ * vel_[k][i]);
            }
    }

    void set_lr(double lr) { lr_ = lr; }

private:
    double lr_, mu_, wd_;
    std::vector<Tensor> vel_;
};

// ---------------------------------------------------------------------------
// Training

namespace nets {

inline Tensor gather(const Tensor& images, const std::vector<int>& order, std::size_t from, std::size_t count) {
    const std::size_t plane = images.numel() / static_cast<std::size_t>(images.dim(0));
    Shape s = images.shape();
    s[0] = static_cast<int>(count);
    Tensor out(s);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t src = static_cast<std::size_t>(order[from + i]) * plane;
        std::copy(images.data() + src, images.data() + src + plane, out.data() + i * plane);
    }
    return out;
}

inline std::vector<Tensor> grads_of(Tape& tape, Var loss, const std::vector<Var>& pv) {
    tape.backward(loss);
    std::vector<Tensor> g;
    g.reserve(pv.size());
    for (Var v : pv) g.push_back(tape.adjoint(v));
    return g;
}

}  // namespace nets

struct EpsTrainConfig {
    int epochs = 10;
    int batch = 16;
    double lr = 1e-3;
    std::uint64_t seed = 1;
};

using TrainLog = std::function<void(int epoch, int step, double loss)>;

/// Minimizes mean squared error between eps and eps_theta(z_t, t), t uniform in [1, T].
inline EpsilonNet train_epsilon(const Tensor& images, const Schedule& sched, const EpsTrainConfig& cfg,
                                const TrainLog& log = {}) {
    EpsilonNet net(cfg.seed);
    const int n = images.dim(0);
    if (n < 1 || cfg.epochs < 1 || cfg.batch < 1) throw ArgumentError("training needs data, epochs and batch >= 1");
    const RngStream root = RngStream(cfg.seed).substream({tag(StreamTag::training), 1});
    Adam opt(cfg.lr);
    const int steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    const int total = steps_per_epoch * cfg.epochs;
    std::vector<int> order(static_cast<std::size_t>(n));
    int step = 0;
    double running = 0.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        RngStream shuf = root.substream({static_cast<std::uint64_t>(epoch), 0});
        shuf.shuffle(order);
        for (int b = 0; b < steps_per_epoch; ++b, ++step) {
            const std::size_t from = static_cast<std::size_t>(b) * cfg.batch;
            const std::size_t count = std::min<std::size_t>(cfg.batch, n - from);
            const Tensor x = nets::gather(images, order, from, count);
            RngStream r = root.substream({static_cast<std::uint64_t>(epoch), 1, static_cast<std::uint64_t>(b)});
            std::vector<int> ts(count);
            for (int& t : ts) t = r.uniform_int(1, sched.T);
            const Tensor eps = r.normal_tensor(x.shape());
            Tensor z(x.shape());
            const std::size_t plane = x.numel() / count;
            for (std::size_t i = 0; i < count; ++i) {
                const double a = std::sqrt(sched.alpha_bar[ts[i]]), s = std::sqrt(1.0 - sched.alpha_bar[ts[i]]);
                for (std::size_t j = i * plane; j < (i + 1) * plane; ++j) z[j] = static_cast<float>(a * x[j] + s * eps[j]);
            }
            // Cosine decay to 10% of the base rate.
            opt.set_lr(cfg.lr * (0.55 + 0.45 * std::cos(std::numbers::pi * step / total)));
            Tape tape;
            const std::vector<Var> pv = net.params.bind(tape, true);
            double loss_value = 0.0;
            std::vector<Tensor> g;
            try {
                Var pred = net.forward(tape, pv, tape.constant(z), ts);
                Var loss = ndgrad::mean(ndgrad::square(ndgrad::sub(pred, tape.constant(eps))));
                loss_value = loss.value().item();
                g = nets::grads_of(tape, loss, pv);
            } catch (const NumericError& e) {
                throw TrainingError("epsilon training diverged at step " + std::to_string(step) + ": " + e.what());
            }
            running = step == 0 ? loss_value : 0.99 * running + 0.01 * loss_value;
            opt.step(net.params.values(), g);
            if (log) log(epoch, step, running);
        }
    }
    net.final_loss = running;
    return net;
}

struct ClfTrainConfig {
    int epochs = 6;
    int batch = 32;
    double lr = 0.02;
    double momentum = 0.9;
    double weight_decay = 0.0;
    std::uint64_t seed = 1;
};

inline Classifier train_classifier(const Tensor& images, const std::vector<int>& labels, const ClfTrainConfig& cfg,
                                   const TrainLog& log = {}) {
    Classifier net(cfg.seed);
    const int n = images.dim(0);
    if (n < 1 || static_cast<int>(labels.size()) != n) throw ArgumentError("one label per training image required");
    const RngStream root = RngStream(cfg.seed).substream({tag(StreamTag::training), 2});
    SgdMomentum opt(cfg.lr, cfg.momentum, cfg.weight_decay);
    const int steps_per_epoch = (n + cfg.batch - 1) / cfg.batch;
    const int total = steps_per_epoch * cfg.epochs;
    std::vector<int> order(static_cast<std::size_t>(n));
    int step = 0;
    double running = 0.0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        RngStream shuf = root.substream({static_cast<std::uint64_t>(epoch)});
        shuf.shuffle(order);
        for (int b = 0; b < steps_per_epoch; ++b, ++step) {
            const std::size_t from = static_cast<std::size_t>(b) * cfg.batch;
            const std::size_t count = std::min<std::size_t>(cfg.batch, n - from);
            const Tensor x = nets::gather(images, order, from, count);
            std::vector<int> y(count);
            for (std::size_t i = 0; i < count; ++i) y[i] = labels[static_cast<std::size_t>(order[from + i])];
            opt.set_lr(cfg.lr * (0.55 + 0.45 * std::cos(std::numbers::pi * step / total)));
            Tape tape;
            const std::vector<Var> pv = net.params.bind(tape, true);
            double loss_value = 0.0;
            std::vector<Tensor> g;
            try {
                auto out = net.forward(tape, pv, tape.constant(x));
                Var loss = ndgrad::scale(ndgrad::mean(ndgrad::pick(ndgrad::log_softmax(out.logits), y)), -1.0f);
                loss_value = loss.value().item();
                g = nets::grads_of(tape, loss, pv);
            } catch (const NumericError& e) {
                throw TrainingError("classifier training diverged at step " + std::to_string(step) + ": " + e.what());
            }
            running = step == 0 ? loss_value : 0.98 * running + 0.02 * loss_value;
            opt.step(net.params.values(), g);
            if (log) log(epoch, step, running);
        }
    }
    net.final_loss = running;
    return net;
}

inline double accuracy(const Classifier& c, const Tensor& images, const std::vector<int>& labels) {
    const Tensor p = c.probs(images);
    int hit = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) hit += ((p[2 * i + 1] > p[2 * i]) ? 1 : 0) == labels[i];
    return static_cast<double>(hit) / static_cast<double>(labels.size());
}

}  // namespace maskdime
