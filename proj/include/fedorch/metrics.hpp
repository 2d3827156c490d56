#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fedorch/datakit.hpp"
#include "fedorch/error.hpp"
#include "fedorch/tensor.hpp"
#include "fedorch/trainer.hpp"

namespace fedorch {

struct ConfusionCounts {
  std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::uint64_t total() const noexcept { return tp + fp + tn + fn; }

  ConfusionCounts& operator+=(const ConfusionCounts& o) noexcept {
    tp += o.tp;
    fp += o.fp;
    tn += o.tn;
    fn += o.fn;
    return *this;
  }

  bool operator==(const ConfusionCounts&) const = default;
};

/// Positive iff score >= threshold.
inline ConfusionCounts confusion(std::span<const double> scores, std::span<const std::uint8_t> labels,
                                 double threshold = 0.5) {
  require(scores.size() == labels.size(), ErrorCode::LengthMismatch, "scores and labels differ in length");
  require(!scores.empty(), ErrorCode::Empty, "no samples");
  ConfusionCounts c;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const bool predicted = scores[i] >= threshold;
    const bool actual = labels[i] != 0;
    if (predicted && actual) ++c.tp;
    else if (predicted) ++c.fp;
    else if (actual) ++c.fn;
    else ++c.tn;
  }
  return c;
}

// Rates are undefined when their denominator class is absent from the test set.

inline std::optional<double> sensitivity(const ConfusionCounts& c) {
  if (c.tp + c.fn == 0) return std::nullopt;
  return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

inline std::optional<double> specificity(const ConfusionCounts& c) {
  if (c.tn + c.fp == 0) return std::nullopt;
  return static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
}

inline std::optional<double> balanced_accuracy(const ConfusionCounts& c) {
  auto se = sensitivity(c), sp = specificity(c);
  if (!se || !sp) return std::nullopt;
  return (*se + *sp) / 2.0;
}

inline std::optional<double> accuracy(const ConfusionCounts& c) {
  if (c.total() == 0) return std::nullopt;
  return static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
}

/// Mann-Whitney AUC: share of (positive, negative) pairs ranked correctly,
/// ties counting one half. Computed from mid-ranks in O(n log n).
inline double roc_auc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  require(scores.size() == labels.size(), ErrorCode::LengthMismatch, "scores and labels differ in length");
  std::size_t n_pos = 0;
  for (auto y : labels) n_pos += (y != 0);
  const std::size_t n_neg = labels.size() - n_pos;
  require(n_pos > 0 && n_neg > 0, ErrorCode::SingleClass, "AUC needs both classes");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Ranks doubled so tied mid-ranks stay integral.
  std::uint64_t pos_rank_sum2 = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t mid_rank2 = static_cast<std::uint64_t>(i + 1 + j);  // 2 * mean of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) pos_rank_sum2 += mid_rank2;
    i = j;
  }
  const std::uint64_t u2 = pos_rank_sum2 - static_cast<std::uint64_t>(n_pos) * (n_pos + 1);
  return static_cast<double>(u2) / (2.0 * static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

struct EvalReport {
  std::string model_site;
  std::string test_site;
  ConfusionCounts counts;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
  std::optional<double> balanced_accuracy;
  std::optional<double> accuracy;
  std::optional<double> roc_auc;  // empty when the test split holds a single class
};

inline EvalReport make_report(std::string model_site, std::string test_site, std::span<const double> scores,
                              std::span<const std::uint8_t> labels) {
  EvalReport r;
  r.model_site = std::move(model_site);
  r.test_site = std::move(test_site);
  r.counts = confusion(scores, labels);
  r.sensitivity = fedorch::sensitivity(r.counts);
  r.specificity = fedorch::specificity(r.counts);
  r.balanced_accuracy = fedorch::balanced_accuracy(r.counts);
  r.accuracy = fedorch::accuracy(r.counts);
  try {
    r.roc_auc = fedorch::roc_auc(scores, labels);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::SingleClass) throw;
  }
  return r;
}

/// Scores `model` on the test split of `site`.
inline EvalReport evaluate(const TensorMap& model, const SiteDataset& site, std::string model_site = "") {
  Network net = Network::from_weights(model);
  require(net.input_dim() == site.dim(), ErrorCode::DimensionMismatch,
          "model " + model_site + " expects " + std::to_string(net.input_dim()) + " features, site " + site.site_id +
              " has " + std::to_string(site.dim()));
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  for (std::size_t i : site.split.test) {
    scores.push_back(net.predict(site.features.row(i)));
    labels.push_back(site.labels[i]);
  }
  return make_report(std::move(model_site), site.site_id, scores, labels);
}

/// One report per (model, test site) pair, self-pairs included, in key order.
inline std::vector<EvalReport> cross_eval(const std::map<std::string, TensorMap>& models,
                                          const std::map<std::string, SiteDataset>& sites) {
  require(!models.empty() && !sites.empty(), ErrorCode::Empty, "cross_eval needs models and sites");
  std::vector<EvalReport> out;
  out.reserve(models.size() * sites.size());
  for (const auto& [model_site, model] : models)
    for (const auto& [site_id, site] : sites) out.push_back(evaluate(model, site, model_site));
  return out;
}

inline void write_eval_csv(std::span<const EvalReport> reports, std::ostream& out) {
  auto cell = [&](const std::optional<double>& v) {
    if (v) {
      char buf[32];
      auto res = std::to_chars(buf, buf + sizeof buf, *v);
      out.write(buf, res.ptr - buf);
    }
  };
  out << "model_site,test_site,tp,fp,tn,fn,sensitivity,specificity,balanced_accuracy,accuracy,roc_auc\n";
  for (const auto& r : reports) {
    out << r.model_site << ',' << r.test_site << ',' << r.counts.tp << ',' << r.counts.fp << ',' << r.counts.tn << ','
        << r.counts.fn << ',';
    cell(r.sensitivity);
    out << ',';
    cell(r.specificity);
    out << ',';
    cell(r.balanced_accuracy);
    out << ',';
    cell(r.accuracy);
    out << ',';
    cell(r.roc_auc);
    out << '\n';
  }
}

inline nlohmann::json to_json(const EvalReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"model_site", r.model_site},
          {"test_site", r.test_site},
          {"tp", r.counts.tp},
          {"fp", r.counts.fp},
          {"tn", r.counts.tn},
          {"fn", r.counts.fn},
          {"sensitivity", opt(r.sensitivity)},
          {"specificity", opt(r.specificity)},
          {"balanced_accuracy", opt(r.balanced_accuracy)},
          {"accuracy", opt(r.accuracy)},
          {"roc_auc", opt(r.roc_auc)}};
}

/// Spearman rank correlation with mid-ranks for ties.
inline double spearman(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && a.size() >= 2, ErrorCode::LengthMismatch, "spearman needs two equal-length series");
  auto ranks = [](std::span<const double> v) {
    std::vector<std::size_t> order(v.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return v[x] < v[y]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < order.size();) {
      std::size_t j = i;
      while (j < order.size() && v[order[j]] == v[order[i]]) ++j;
      for (std::size_t k = i; k < j; ++k) r[order[k]] = (static_cast<double>(i + j) + 1.0) / 2.0;
      i = j;
    }
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0 || sbb == 0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

}  // namespace fedorch
