#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "entmask/errors.hpp"
#include "entmask/model.hpp"

namespace entmask {

// How far fine-tuning moved each parameter, as a relative L1 percentage:
// 100 * ||W_ft - W_pre||_1 / ||W_pre||_1. Zero-initialised parameters (the
// biases) get an epsilon denominator so an untouched parameter reports
// exactly 0 and a touched one reports a finite positive number.
inline double relative_l1_percent(const Tensor& pre, const Tensor& ft) {
  if (pre.dims() != ft.dims()) throw ShapeError("relative_l1_percent: shape mismatch");
  double moved = 0.0, base = 0.0;
  const float* a = pre.values().data();
  const float* b = ft.values().data();
  for (int64_t i = 0; i < pre.numel(); ++i) {
    moved += std::fabs(static_cast<double>(b[i]) - static_cast<double>(a[i]));
    base += std::fabs(static_cast<double>(a[i]));
  }
  if (moved == 0.0) return 0.0;
  return 100.0 * moved / std::max(base, 1e-12);
}

struct DivergenceReport {
  std::string task;
  std::vector<std::pair<std::string, double>> parameters;
  std::vector<std::pair<std::string, double>> layers;
  std::vector<std::pair<std::string, double>> components;

  double parameter(const std::string& name) const {
    for (const auto& [key, value] : parameters) {
      if (key == name) return value;
    }
    throw ContractError("divergence report has no parameter '" + name + "'");
  }
};

namespace detail {

inline std::string layer_group(const std::string& name) {
  const size_t dot = name.find('.');
  return dot == std::string::npos ? name : name.substr(0, dot);
}

inline std::string component_group(const std::string& name) {
  if (name.find(".attn.") != std::string::npos) return "attention";
  if (name.find(".ffn.") != std::string::npos) return "feed_forward";
  return "";
}

inline void push_mean(std::vector<std::pair<std::string, double>>& out, const std::string& key,
                      const std::vector<std::pair<std::string, double>>& parts) {
  double sum = 0.0;
  int n = 0;
  for (const auto& [k, v] : parts) {
    if (k == key) {
      sum += v;
      ++n;
    }
  }
  out.emplace_back(key, sum / static_cast<double>(n));
}

}  // namespace detail

inline DivergenceReport weight_divergence(const EncoderModel& pretrained,
                                          const EncoderModel& finetuned,
                                          const std::string& task = "") {
  if (!(pretrained.config() == finetuned.config())) {
    throw ConfigError("weight divergence: model configurations differ");
  }
  const auto& pre = pretrained.params();
  const auto& ft = finetuned.params();
  if (pre.size() != ft.size()) {
    throw ConfigError("weight divergence: models carry different parameter sets");
  }

  DivergenceReport report;
  report.task = task;
  std::vector<std::pair<std::string, double>> by_layer, by_component;
  for (size_t i = 0; i < pre.size(); ++i) {
    const std::string& name = pre[i].first;
    if (name != ft[i].first) {
      throw ConfigError("weight divergence: parameter name mismatch at '" + name + "' vs '" +
                        ft[i].first + "'");
    }
    const double pct = relative_l1_percent(pre[i].second, ft[i].second);
    report.parameters.emplace_back(name, pct);
    by_layer.emplace_back(detail::layer_group(name), pct);
    const std::string component = detail::component_group(name);
    if (!component.empty()) by_component.emplace_back(component, pct);
  }

  for (const auto& [key, value] : by_layer) {
    (void)value;
    bool seen = false;
    for (const auto& [done, v] : report.layers) {
      (void)v;
      if (done == key) {
        seen = true;
        break;
      }
    }
    if (!seen) detail::push_mean(report.layers, key, by_layer);
  }
  for (const char* key : {"attention", "feed_forward"}) {
    detail::push_mean(report.components, key, by_component);
  }
  return report;
}

inline void to_json(nlohmann::json& j, const DivergenceReport& r) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, pct] : r.parameters) params[name] = pct;
  nlohmann::json layers = nlohmann::json::object();
  for (const auto& [name, pct] : r.layers) layers[name] = pct;
  nlohmann::json components = nlohmann::json::object();
  for (const auto& [name, pct] : r.components) components[name] = pct;
  j = nlohmann::json{{"task", r.task},
                     {"parameters", params},
                     {"layers", layers},
                     {"components", components}};
}

}  // namespace entmask
