#pragma once

#include <array>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <vector>

#include "stepsim/cache.hpp"
#include "stepsim/config.hpp"
#include "stepsim/mlp.hpp"

namespace stepsim {

// One access's probe readout over a table's 16 sets, reduced to hot bits.
using TraceRow = std::array<std::uint8_t, CacheTrace::kSets>;

inline TraceRow to_trace_row(const CacheTrace& t) {
  TraceRow r{};
  for (int s = 0; s < CacheTrace::kSets; ++s) r[s] = t.miss[s];
  return r;
}

inline constexpr int kWindowSide = 8;                        // accesses each way
inline constexpr int kWindowRows = 2 * kWindowSide + 1;      // 17
inline constexpr int kWindowBits = kWindowRows * CacheTrace::kSets;  // 272

// Binary feature vector for the access at `index`: the 8 preceding rows,
// the row itself and the 8 subsequent rows, zero padded at the edges.
inline std::vector<std::uint8_t> encode_window(const std::vector<TraceRow>& seq,
                                               std::size_t index) {
  if (index >= seq.size()) throw std::out_of_range("window index out of range");
  std::vector<std::uint8_t> out(kWindowBits, 0);
  for (int r = 0; r < kWindowRows; ++r) {
    long src = static_cast<long>(index) + r - kWindowSide;
    if (src < 0 || src >= static_cast<long>(seq.size())) continue;
    for (int s = 0; s < CacheTrace::kSets; ++s)
      out[r * CacheTrace::kSets + s] = seq[src][s];
  }
  return out;
}

// Accesses whose trace lights up more than this many sets are dropped as
// outliers when building datasets and measurements.
inline constexpr int kOutlierHotSets = 8;

inline bool is_outlier(const TraceRow& row) {
  int n = 0;
  for (auto b : row) n += b;
  return n > kOutlierHotSets;
}

// Rule-based denoiser: a hot set of access i that is also hot in one of the
// next `window` accesses is explainable as an out-of-order trail of that
// later access and gets removed. Never returns an empty candidate list;
// if everything is explained away it falls back to all hot sets.
inline std::vector<std::vector<int>> rule_denoise(const std::vector<TraceRow>& seq,
                                                  std::uint32_t window) {
  std::vector<std::vector<int>> out(seq.size());
  for (std::size_t i = 0; i < seq.size(); ++i) {
    std::uint32_t later = 0;
    for (std::size_t j = i + 1; j < seq.size() && j <= i + window; ++j)
      for (int s = 0; s < CacheTrace::kSets; ++s)
        if (seq[j][s]) later |= 1u << s;
    std::vector<int> kept, hot;
    for (int s = 0; s < CacheTrace::kSets; ++s) {
      if (!seq[i][s]) continue;
      hot.push_back(s);
      if (!(later & (1u << s))) kept.push_back(s);
    }
    out[i] = kept.empty() ? hot : kept;
    if (out[i].empty())
      for (int s = 0; s < CacheTrace::kSets; ++s) out[i].push_back(s);
  }
  return out;
}

// Builds labeled windows from one per-table trace sequence.
inline void append_windows(Dataset& data, const std::vector<TraceRow>& seq,
                           const std::vector<int>& labels,
                           bool drop_outliers = true) {
  if (labels.size() != seq.size())
    throw std::invalid_argument("label count must match sequence length");
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (drop_outliers && is_outlier(seq[i])) continue;
    data.x.push_back(encode_window(seq, i));
    data.y.push_back(labels[i]);
  }
}

inline Mlp make_classifier_model(const SimConfig& cfg) {
  return Mlp({static_cast<std::size_t>(kWindowBits), cfg.mlp_hidden1,
              cfg.mlp_hidden2, static_cast<std::size_t>(CacheTrace::kSets)},
             derive_seed(cfg.seed, "mlp-arch"));
}

inline Mlp train_classifier(const Dataset& data, const SimConfig& cfg) {
  if (data.size() == 0) throw std::invalid_argument("empty dataset");
  Mlp m = make_classifier_model(cfg);
  MlpHyper h;
  h.learning_rate = cfg.mlp_learning_rate;
  h.epochs = cfg.mlp_epochs;
  h.batch = cfg.mlp_batch;
  h.dropout = cfg.mlp_dropout;
  h.seed = derive_seed(cfg.seed, "mlp-fit");
  m.fit(data, h);
  return m;
}

// --- dataset CSV: the trace-dump format plus a label column ---------------

inline void write_dataset_csv(std::ostream& out,
                              const std::vector<TraceRow>& rows,
                              const std::vector<int>& labels) {
  out << "ordinal";
  for (int s = 0; s < CacheTrace::kSets; ++s) out << ",set" << s;
  out << ",label\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out << i;
    for (int s = 0; s < CacheTrace::kSets; ++s) out << ',' << int(rows[i][s]);
    out << ',' << (i < labels.size() ? labels[i] : -1) << "\n";
  }
}

inline std::pair<std::vector<TraceRow>, std::vector<int>> read_dataset_csv(
    std::istream& in) {
  std::vector<TraceRow> rows;
  std::vector<int> labels;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      header = false;
      continue;
    }
    if (line.empty()) continue;
    std::istringstream is(line);
    std::string cell;
    std::getline(is, cell, ',');  // ordinal
    TraceRow row{};
    for (int s = 0; s < CacheTrace::kSets; ++s) {
      if (!std::getline(is, cell, ','))
        throw std::invalid_argument("dataset csv: short row");
      row[s] = static_cast<std::uint8_t>(std::stoi(cell));
    }
    int label = -1;
    if (std::getline(is, cell, ',')) label = std::stoi(cell);
    rows.push_back(row);
    labels.push_back(label);
  }
  return {rows, labels};
}

}  // namespace stepsim
