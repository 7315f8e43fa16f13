#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <stdexcept>
#include <vector>

#include "stepsim/types.hpp"

namespace stepsim {

struct Dataset {
  std::vector<std::vector<std::uint8_t>> x;  // binary feature vectors
  std::vector<int> y;                        // class labels

  std::size_t size() const { return x.size(); }
};

struct MlpHyper {
  double learning_rate = 0.05;
  std::uint32_t epochs = 12;
  std::uint32_t batch = 64;
  double dropout = 0.2;
  std::uint64_t seed = 1;
};

struct Prediction {
  std::vector<double> prob;   // softmax over classes, sums to 1
  std::vector<int> ranking;   // classes ordered by descending probability
};

// Fully connected network with rectifier hidden layers, softmax output and
// cross-entropy loss. Dropout is applied to hidden activations during
// training only; inference is deterministic.
class Mlp {
 public:
  struct Layer {
    std::size_t in = 0, out = 0;
    std::vector<double> w;  // row-major out x in
    std::vector<double> b;
  };

  Mlp() = default;

  Mlp(const std::vector<std::size_t>& sizes, std::uint64_t seed) {
    if (sizes.size() < 2) throw std::invalid_argument("need at least two layer sizes");
    auto rng = make_rng(seed, "mlp-init");
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      Layer layer;
      layer.in = sizes[l];
      layer.out = sizes[l + 1];
      layer.w.resize(layer.in * layer.out);
      layer.b.assign(layer.out, 0.0);
      std::normal_distribution<double> d(0.0, std::sqrt(2.0 / double(layer.in)));
      for (auto& w : layer.w) w = d(rng);
      layers_.push_back(std::move(layer));
    }
  }

  std::vector<Layer>& layers() { return layers_; }
  const std::vector<Layer>& layers() const { return layers_; }
  std::size_t input_size() const { return layers_.front().in; }
  std::size_t output_size() const { return layers_.back().out; }

  template <typename T>
  std::vector<double> forward(const T* x) const {
    std::vector<double> act(layers_.front().in);
    for (std::size_t i = 0; i < act.size(); ++i) act[i] = double(x[i]);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      act = affine(layers_[l], act);
      if (l + 1 < layers_.size())
        for (auto& v : act) v = v > 0.0 ? v : 0.0;
    }
    softmax(act);
    return act;
  }

  template <typename T>
  Prediction predict(const std::vector<T>& x) const {
    if (x.size() != input_size())
      throw std::invalid_argument("input dimension mismatch");
    Prediction p;
    p.prob = forward(x.data());
    p.ranking.resize(p.prob.size());
    std::iota(p.ranking.begin(), p.ranking.end(), 0);
    std::stable_sort(p.ranking.begin(), p.ranking.end(),
                     [&](int a, int b) { return p.prob[a] > p.prob[b]; });
    return p;
  }

  template <typename T>
  double loss(const T* x, int label) const {
    auto p = forward(x);
    return -std::log(std::max(p[label], 1e-300));
  }

  struct Gradients {
    std::vector<std::vector<double>> dw;
    std::vector<std::vector<double>> db;
  };

  Gradients zero_gradients() const {
    Gradients g;
    for (const auto& l : layers_) {
      g.dw.emplace_back(l.w.size(), 0.0);
      g.db.emplace_back(l.b.size(), 0.0);
    }
    return g;
  }

  // Analytic gradients of the cross-entropy loss for one sample,
  // accumulated into g. The dropout mask, when given, zeroes hidden units
  // layer by layer (inverted dropout scaling already applied by caller).
  template <typename T>
  double accumulate_gradients(const T* x, int label, Gradients& g,
                              const std::vector<std::vector<double>>* drop_scale =
                                  nullptr) const {
    const std::size_t L = layers_.size();
    std::vector<std::vector<double>> acts(L + 1);
    acts[0].resize(layers_.front().in);
    for (std::size_t i = 0; i < acts[0].size(); ++i) acts[0][i] = double(x[i]);
    for (std::size_t l = 0; l < L; ++l) {
      acts[l + 1] = affine(layers_[l], acts[l]);
      if (l + 1 < L) {
        for (auto& v : acts[l + 1]) v = v > 0.0 ? v : 0.0;
        if (drop_scale)
          for (std::size_t i = 0; i < acts[l + 1].size(); ++i)
            acts[l + 1][i] *= (*drop_scale)[l][i];
      }
    }
    std::vector<double> prob = acts[L];
    softmax(prob);
    double loss = -std::log(std::max(prob[label], 1e-300));

    std::vector<double> delta = prob;
    delta[label] -= 1.0;
    for (std::size_t l = L; l-- > 0;) {
      const Layer& layer = layers_[l];
      for (std::size_t o = 0; o < layer.out; ++o) {
        g.db[l][o] += delta[o];
        const double d = delta[o];
        double* dw = &g.dw[l][o * layer.in];
        const double* a = acts[l].data();
        for (std::size_t i = 0; i < layer.in; ++i) dw[i] += d * a[i];
      }
      if (l == 0) break;
      std::vector<double> prev(layer.in, 0.0);
      for (std::size_t o = 0; o < layer.out; ++o) {
        const double d = delta[o];
        const double* w = &layer.w[o * layer.in];
        for (std::size_t i = 0; i < layer.in; ++i) prev[i] += d * w[i];
      }
      // back through dropout scaling and the rectifier
      for (std::size_t i = 0; i < prev.size(); ++i) {
        if (drop_scale) prev[i] *= (*drop_scale)[l - 1][i];
        if (acts[l][i] <= 0.0) prev[i] = 0.0;
      }
      delta = std::move(prev);
    }
    return loss;
  }

  void fit(const Dataset& data, const MlpHyper& h) {
    if (data.size() == 0) throw std::invalid_argument("empty dataset");
    auto rng = make_rng(h.seed, "mlp-train");
    std::uniform_real_distribution<double> uni(0.0, 1.0);
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::uint32_t epoch = 0; epoch < h.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t start = 0; start < order.size(); start += h.batch) {
        std::size_t end = std::min(order.size(), start + h.batch);
        Gradients g = zero_gradients();
        // one dropout mask per minibatch
        std::vector<std::vector<double>> drop(layers_.size() - 1);
        for (std::size_t l = 0; l + 1 < layers_.size(); ++l) {
          drop[l].assign(layers_[l].out, 1.0);
          if (h.dropout > 0.0)
            for (auto& m : drop[l])
              m = uni(rng) < h.dropout ? 0.0 : 1.0 / (1.0 - h.dropout);
        }
        for (std::size_t k = start; k < end; ++k) {
          const auto& xs = data.x[order[k]];
          accumulate_gradients(xs.data(), data.y[order[k]], g,
                               h.dropout > 0.0 ? &drop : nullptr);
        }
        double scale = h.learning_rate / double(end - start);
        for (std::size_t l = 0; l < layers_.size(); ++l) {
          for (std::size_t i = 0; i < layers_[l].w.size(); ++i)
            layers_[l].w[i] -= scale * g.dw[l][i];
          for (std::size_t i = 0; i < layers_[l].b.size(); ++i)
            layers_[l].b[i] -= scale * g.db[l][i];
        }
      }
    }
  }

  double evaluate(const Dataset& data) const {
    if (data.size() == 0) throw std::invalid_argument("empty dataset");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      auto p = forward(data.x[i].data());
      std::size_t arg = 0;
      for (std::size_t c = 1; c < p.size(); ++c)
        if (p[c] > p[arg]) arg = c;
      correct += int(arg) == data.y[i];
    }
    return double(correct) / double(data.size());
  }

  // --- serialization: magic, layer count, sizes, then per layer row-major
  // weights and biases as little-endian doubles.
  void save(std::ostream& out) const {
    const char magic[8] = {'S', 'S', 'M', 'L', 'P', '0', '0', '1'};
    out.write(magic, 8);
    write_u32(out, static_cast<std::uint32_t>(layers_.size()) + 1);
    write_u32(out, static_cast<std::uint32_t>(layers_.front().in));
    for (const auto& l : layers_) write_u32(out, static_cast<std::uint32_t>(l.out));
    for (const auto& l : layers_) {
      for (double w : l.w) write_f64(out, w);
      for (double b : l.b) write_f64(out, b);
    }
  }

  static Mlp load(std::istream& in) {
    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8 || std::string(magic, 8) != "SSMLP001")
      throw std::invalid_argument("bad model magic");
    std::uint32_t n_sizes = read_u32(in);
    std::vector<std::size_t> sizes(n_sizes);
    for (auto& s : sizes) s = read_u32(in);
    Mlp m;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      Layer layer;
      layer.in = sizes[l];
      layer.out = sizes[l + 1];
      layer.w.resize(layer.in * layer.out);
      layer.b.resize(layer.out);
      layers_read(in, layer);
      m.layers_.push_back(std::move(layer));
    }
    if (!in) throw std::invalid_argument("truncated model file");
    return m;
  }

 private:
  static std::vector<double> affine(const Layer& l, const std::vector<double>& x) {
    std::vector<double> out(l.out);
    for (std::size_t o = 0; o < l.out; ++o) {
      const double* w = &l.w[o * l.in];
      double acc = l.b[o];
      for (std::size_t i = 0; i < l.in; ++i) acc += w[i] * x[i];
      out[o] = acc;
    }
    return out;
  }

  static void softmax(std::vector<double>& v) {
    double mx = *std::max_element(v.begin(), v.end());
    double sum = 0.0;
    for (auto& x : v) {
      x = std::exp(x - mx);
      sum += x;
    }
    for (auto& x : v) x /= sum;
  }

  static void write_u32(std::ostream& out, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>(v >> (8 * i));
    out.write(b, 4);
  }
  static std::uint32_t read_u32(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(b[i]) << (8 * i);
    return v;
  }
  static void write_f64(std::ostream& out, double v) {
    std::uint64_t bits;
    static_assert(sizeof bits == sizeof v);
    std::memcpy(&bits, &v, 8);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>(bits >> (8 * i));
    out.write(b, 8);
  }
  static double read_f64(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= std::uint64_t(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }
  static void layers_read(std::istream& in, Layer& l) {
    for (auto& w : l.w) w = read_f64(in);
    for (auto& b : l.b) b = read_f64(in);
  }

  std::vector<Layer> layers_;
};

}  // namespace stepsim
