// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "fmtlab/binary_io.hpp"
#include "fmtlab/config.hpp"
#include "fmtlab/error.hpp"
#include "fmtlab/experiments.hpp"
#include "fmtlab/train.hpp"

#ifndef FMTLAB_VERSION
#define FMTLAB_VERSION "dev"
#endif

namespace fmtlab {

// Rectangular table of scalar cells (string, integer or double), written as
// CSV plus a JSON mirror with the same values.
class ResultTable {
 public:
  using Cell = nlohmann::ordered_json;

  explicit ResultTable(std::vector<std::string> columns) : columns_(std::move(columns)) {
    if (columns_.empty()) throw UsageError("result table needs at least one column");
  }

  const std::vector<std::string>& columns() const { return columns_; }
  const std::vector<std::vector<Cell>>& rows() const { return rows_; }
  std::size_t size() const { return rows_.size(); }

  void add_row(std::vector<Cell> cells) {
    if (cells.size() != columns_.size()) {
      throw UsageError("result row has " + std::to_string(cells.size()) + " cells, table has " +
                       std::to_string(columns_.size()) + " columns");
    }
    for (const auto& c : cells)
      if (!c.is_primitive() || c.is_null()) throw UsageError("result cells must be strings or numbers");
    rows_.push_back(std::move(cells));
  }

  static std::string format_cell(const Cell& c) {
    if (c.is_string()) return quote(c.get<std::string>());
    if (c.is_boolean()) return c.get<bool>() ? "true" : "false";
    if (c.is_number_unsigned()) return std::to_string(c.get<std::uint64_t>());
    if (c.is_number_integer()) return std::to_string(c.get<std::int64_t>());
    const double v = c.get<double>();
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
  }

  std::string to_csv() const {
    std::string out;
    for (std::size_t i = 0; i < columns_.size(); ++i) out += (i ? "," : "") + quote(columns_[i]);
    out += "\n";
    for (const auto& row : rows_) {
      for (std::size_t i = 0; i < row.size(); ++i) out += (i ? "," : "") + format_cell(row[i]);
      out += "\n";
    }
    return out;
  }

  // {"columns": [...], "rows": [{column: value}, ...]}; non-finite doubles
  // become the strings "nan", "inf", "-inf".
  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["columns"] = columns_;
    j["rows"] = nlohmann::ordered_json::array();
    for (const auto& row : rows_) {
      nlohmann::ordered_json r = nlohmann::ordered_json::object();
      for (std::size_t i = 0; i < row.size(); ++i) {
        const auto& c = row[i];
        if (c.is_number_float() && !std::isfinite(c.get<double>())) {
          r[columns_[i]] = format_cell(c);
        } else {
          r[columns_[i]] = c;
        }
      }
      j["rows"].push_back(std::move(r));
    }
    return j;
  }

 private:
  static std::string quote(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + "\"";
  }

  std::vector<std::string> columns_;
  std::vector<std::vector<Cell>> rows_;
};

// Minimal RFC 4180 reader: quoted fields, doubled quotes, no embedded CR.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"' && i + 1 < text.size() && text[i + 1] == '"') {
        field += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        field += c;
      }
      continue;
    }
    any = true;
    if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      any = false;
    } else {
      field += c;
    }
  }
  if (quoted) throw DataError("csv: unterminated quoted field");
  if (any) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Standard tables

inline std::string factor_list(const ModelConfig& c) {
  if (c.kind != ModelKind::fmt) return "-";
  std::string s;
  for (auto f : c.factors) s += (s.empty() ? "" : " ") + f.label(c.modality_names());
  return s;
}

inline std::vector<std::string> metric_keys(const std::vector<TrialResult>& trials) {
  std::set<std::string> keys;
  for (const auto& t : trials)
    for (const auto& [k, v] : t.test_metrics) keys.insert(k);
  return {keys.begin(), keys.end()};
}

inline ResultTable trial_table(const std::vector<TrialResult>& trials) {
  const auto keys = metric_keys(trials);
  std::vector<std::string> cols{"label",        "seed",  "kind",         "factors",   "mtl_layers",
                                "fms_units",    "heads", "attentions_per_layer",    "embed_dim",
                                "dropout",      "learning_rate", "epochs_run", "best_epoch", "steps",
                                "validation_loss"};
  cols.insert(cols.end(), keys.begin(), keys.end());
  ResultTable table(cols);
  for (const auto& t : trials) {
    std::vector<ResultTable::Cell> row{t.label,
                                       t.model.seed,
                                       to_string(t.model.kind),
                                       factor_list(t.model),
                                       t.model.mtl_layers,
                                       t.model.fms_units,
                                       t.model.heads,
                                       t.attentions_per_layer,
                                       t.model.modalities.empty() ? 0 : t.model.modalities[0].embed_dim,
                                       t.model.dropout,
                                       t.train.learning_rate,
                                       t.epochs_run,
                                       t.best_epoch,
                                       t.steps,
                                       t.validation_loss};
    for (const auto& k : keys) {
      auto it = t.test_metrics.find(k);
      row.push_back(it == t.test_metrics.end() ? std::nan("") : it->second);
    }
    table.add_row(std::move(row));
  }
  return table;
}

inline ResultTable summary_table(const std::vector<VariantSummary>& summary) {
  std::vector<std::string> keys;
  if (!summary.empty())
    for (const auto& [k, v] : summary.front().mean) keys.push_back(k);
  std::vector<std::string> cols{"variant", "runs"};
  for (const auto& k : keys) {
    cols.push_back(k + "_mean");
    cols.push_back(k + "_std");
  }
  ResultTable table(cols);
  for (const auto& s : summary) {
    std::vector<ResultTable::Cell> row{s.name, s.runs};
    for (const auto& k : keys) {
      row.push_back(s.mean.at(k));
      row.push_back(s.stddev.at(k));
    }
    table.add_row(std::move(row));
  }
  return table;
}

inline ResultTable history_table(const TrainResult& r) {
  ResultTable table({"epoch", "train_loss", "validation_loss"});
  for (const auto& h : r.history) table.add_row({h.epoch, h.train_loss, h.validation_loss});
  return table;
}

inline ResultTable metrics_table(const MetricsReport& m) {
  ResultTable table({"metric", "value"});
  for (const auto& [k, v] : m) table.add_row({k, v});
  return table;
}

inline ResultTable greedy_table(const GreedyResult& r, const std::vector<std::string>& names) {
  ResultTable table({"round", "chosen", "validation_loss", "candidates", "factor_set"});
  std::string set_text;
  for (const auto& round : r.trace) {
    set_text += (set_text.empty() ? "" : " ") + round.chosen.label(names);
    table.add_row({round.round, round.chosen.label(names), round.validation_loss, round.candidates.size(),
                   set_text});
  }
  return table;
}

// ---------------------------------------------------------------------------
// Files

inline std::string config_hash(const nlohmann::ordered_json& resolved) {
  return io::hex64(io::fnv1a(resolved.dump()));
}

inline std::string output_stem(const std::string& kind, const std::string& hash, std::uint64_t seed) {
  return kind + "_" + hash + "_s" + std::to_string(seed);
}

// Writes <dir>/<stem>.csv and <dir>/<stem>.json; returns both paths.
inline std::vector<std::string> write_table(const ResultTable& table, const std::string& dir,
                                            const std::string& stem) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string csv = (fs::path(dir) / (stem + ".csv")).string();
  const std::string json = (fs::path(dir) / (stem + ".json")).string();
  io::write_file(csv, table.to_csv());
  io::write_file(json, table.to_json().dump(2) + "\n");
  return {csv, json};
}

struct RunManifest {
  std::string command;
  nlohmann::ordered_json config;
  std::uint64_t seed = 0;
  std::string dataset_hash;
  double duration_seconds = 0.0;
  std::vector<std::string> outputs;

  nlohmann::ordered_json to_json() const {
    return {{"command", command},
            {"config", config},
            {"seed", seed},
            {"code_version", FMTLAB_VERSION},
            {"dataset_hash", dataset_hash},
            {"duration_seconds", duration_seconds},
            {"outputs", outputs}};
  }
};

inline std::string write_manifest(const RunManifest& m, const std::string& dir, const std::string& stem) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::string path = (fs::path(dir) / ("manifest_" + stem + ".json")).string();
  io::write_file(path, m.to_json().dump(2) + "\n");
  return path;
}

}  // namespace fmtlab
