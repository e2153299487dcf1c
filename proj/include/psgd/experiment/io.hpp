#pragma once

// Artifact formats: one JSON object per step trace, RFC 4180 CSV, and the run
// manifest.

#include "psgd/experiment/config.hpp"
#include "psgd/optimizer.hpp"

#include <json.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace psgd::experiment {

using Json = nlohmann::ordered_json;

inline constexpr const char* kToolVersion = PSGD_VERSION;

inline Json opt_json(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

// Field order is the documented JSONL schema.
inline Json trace_json(const StepTrace& s, const std::string& hash, std::uint64_t seed) {
  Json j;
  j["config_hash"] = hash;
  j["seed"] = seed;
  j["t"] = s.t;
  j["phase"] = s.phase;
  j["loss_before"] = opt_json(s.loss_before);
  j["loss_after"] = opt_json(s.loss_after);
  j["grad_norm"] = s.geometry.grad_norm;
  j["masked_grad_norm"] = s.geometry.masked_norm;
  j["masked_perturbed_grad_norm"] = s.geometry.masked_perturbed_norm;
  j["inner"] = s.geometry.inner;
  j["c_norm"] = opt_json(s.criteria.c_norm);
  j["c_sim"] = opt_json(s.criteria.c_sim);
  j["c_align"] = opt_json(s.criteria.c_align);
  j["q"] = opt_json(s.q);
  j["alpha"] = s.alpha;
  j["alpha_clamped"] = s.alpha_clamped;
  j["gamma"] = s.gamma;
  j["mask_count"] = s.mask_count;
  j["mask_density"] = s.mask_density;
  j["perturbation"] = s.perturbation;
  j["probe_sign"] = s.probe_sign ? Json(to_string(*s.probe_sign)) : Json(nullptr);
  j["delta_norm"] = s.delta_norm;
  j["exact"] = s.exact;
  j["descent_residual"] = opt_json(s.descent_residual);
  j["assumption3_ratio"] = opt_json(s.assumption3_ratio);
  j["assumption3_holds"] = s.assumption3_holds ? Json(*s.assumption3_holds) : Json(nullptr);
  return j;
}

inline std::string csv_number(double v) {
  std::array<char, 64> buf{};
  const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), r.ptr);
}

inline std::string csv_number(const std::optional<double>& v) { return v ? csv_number(*v) : std::string(); }

inline std::string csv_quote(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

class CsvWriter {
 public:
  explicit CsvWriter(std::ostream& out) : out_(out) {}

  void row(const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out_ << ',';
      out_ << csv_quote(fields[i]);
    }
    out_ << "\r\n";
  }

 private:
  std::ostream& out_;
};

inline const std::vector<std::string>& summary_columns() {
  static const std::vector<std::string> cols{
      "config_hash", "seed", "scope", "status", "steps", "mean_scaled_masked_sq", "mean_grad_sq", "max_q",
      "undefined_q", "undefined_c_norm", "undefined_c_sim", "undefined_c_align", "clamped_alpha",
      "assumption3_violations", "final_loss", "final_grad_norm", "validation_loss", "core_validation_loss"};
  return cols;
}

inline std::vector<std::string> summary_fields(const Summary& s) {
  return {std::to_string(s.steps),
          csv_number(s.mean_scaled_masked_sq),
          csv_number(s.mean_grad_sq),
          csv_number(s.max_q),
          std::to_string(s.undefined_q),
          std::to_string(s.undefined_c_norm),
          std::to_string(s.undefined_c_sim),
          std::to_string(s.undefined_c_align),
          std::to_string(s.clamped_alpha),
          std::to_string(s.assumption3_violations),
          csv_number(s.final_loss),
          csv_number(s.final_grad_norm)};
}

inline std::ofstream open_output(const std::filesystem::path& p) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
  return out;
}

inline std::string file_sha256(const std::filesystem::path& p) { return sha256_hex(read_file(p.string())); }

struct ManifestInfo {
  std::string command;
  ResolvedConfig config;
  std::string status = "ok";
  std::string detail;
  std::vector<std::string> outputs;  // file names inside the output directory
};

// No timestamps or paths, so equal runs give equal manifests.
inline void write_manifest(const std::filesystem::path& dir, const ManifestInfo& m) {
  Json j;
  j["tool"] = "psgd";
  j["version"] = kToolVersion;
  j["command"] = m.command;
  j["config_hash"] = m.config.hash;
  j["seed"] = m.config.config.seed;
  j["name"] = m.config.config.name;
  j["status"] = m.status;
  j["detail"] = m.detail.empty() ? Json(nullptr) : Json(m.detail);
  Json versions;
  versions["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                      std::to_string(EIGEN_MINOR_VERSION);
  versions["json"] = std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." + std::to_string(NLOHMANN_JSON_VERSION_MINOR) +
                     "." + std::to_string(NLOHMANN_JSON_VERSION_PATCH);
  versions["compiler"] = __VERSION__;
  j["versions"] = versions;
  j["config"] = m.config.canonical;
  Json outs = Json::array();
  for (const auto& name : m.outputs) {
    Json o;
    o["file"] = name;
    o["sha256"] = file_sha256(dir / name);
    outs.push_back(o);
  }
  j["outputs"] = outs;
  auto out = open_output(dir / "manifest.json");
  out << j.dump(2) << "\n";
}

}  // namespace psgd::experiment
