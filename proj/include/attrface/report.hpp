#pragma once

// Result tables: aligned text, CSV emission and re-parsing.

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "attrface/eval.hpp"
#include "attrface/trainer.hpp"

namespace attrface {

struct TableRow {
  std::string label;
  std::vector<double> values;

  friend bool operator==(const TableRow&, const TableRow&) = default;
};

struct Table {
  std::string title;
  std::string label_header = "Mode";
  std::vector<std::string> columns;  // value columns; the label column is implicit
  std::vector<TableRow> rows;
  int precision = 2;                 // decimals in the text rendering

  friend bool operator==(const Table& a, const Table& b) { return a.columns == b.columns && a.rows == b.rows; }
};

/// Label column left-aligned, value columns right-aligned.
inline std::string to_text(const Table& t) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{t.label_header};
  header.insert(header.end(), t.columns.begin(), t.columns.end());
  cells.push_back(header);
  for (const auto& r : t.rows) {
    std::vector<std::string> line{r.label};
    for (double v : r.values) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.*f", t.precision, v);
      line.emplace_back(buf);
    }
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(header.size(), 0);
  // Width in code points so that U+2212 in labels aligns.
  auto length = [](const std::string& s) {
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](char c) { return (c & 0xC0) != 0x80; }));
  };
  for (const auto& line : cells)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], length(line[c]));
  std::ostringstream out;
  if (!t.title.empty()) out << t.title << "\n";
  for (std::size_t l = 0; l < cells.size(); ++l) {
    const auto& line = cells[l];
    for (std::size_t c = 0; c < line.size(); ++c) {
      const std::string pad(width[c] - length(line[c]), ' ');
      if (c == 0) {
        out << line[c] << pad;
      } else {
        out << "  " << pad << line[c];
      }
    }
    out << "\n";
    if (l == 0) {
      std::size_t total = 0;
      for (std::size_t c = 0; c < width.size(); ++c) total += width[c] + (c ? 2 : 0);
      out << std::string(total, '-') << "\n";
    }
  }
  return out.str();
}

/// Optional "# key=value" comment line, a header, then one row per record
/// with values in %.17g.
inline std::string to_csv(const Table& t, const std::string& run_id = "") {
  std::string out;
  if (!run_id.empty()) out += "# run_id=" + run_id + "\n";
  out += "mode";
  for (const auto& c : t.columns) out += "," + c;
  out += "\n";
  for (const auto& r : t.rows) {
    out += r.label;
    for (double v : r.values) out += "," + format_double(v);
    out += "\n";
  }
  return out;
}

/// Inverse of to_csv. Lines starting with '#' are skipped.
inline Table parse_csv(const std::string& text) {
  Table t;
  std::istringstream in(text);
  std::string line;
  bool header = true;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::string field;
    std::istringstream ls(line);
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (!line.empty() && line.back() == ',') fields.emplace_back();
    if (header) {
      if (fields.empty() || fields[0] != "mode") throw FormatError("csv line " + std::to_string(line_no) + ": expected header");
      t.columns.assign(fields.begin() + 1, fields.end());
      header = false;
      continue;
    }
    if (fields.size() != t.columns.size() + 1) {
      throw FormatError("csv line " + std::to_string(line_no) + ": expected " + std::to_string(t.columns.size() + 1) +
                        " fields, got " + std::to_string(fields.size()));
    }
    TableRow row{fields[0], {}};
    for (std::size_t c = 1; c < fields.size(); ++c) {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(fields[c], &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != fields[c].size() || fields[c].empty()) {
        throw FormatError("csv line " + std::to_string(line_no) + ": '" + fields[c] + "' is not a number");
      }
      row.values.push_back(v);
    }
    t.rows.push_back(std::move(row));
  }
  if (header) throw FormatError("csv: missing header");
  return t;
}

// ---------------------------------------------------------------------------
// Suite tables

/// 0 for the baseline, 1 for prediction only, 2 when any group is suppressed.
inline int row_category(const GroupModeAssignment& m) {
  if (m.is_baseline()) return 0;
  return m.suppressed().empty() ? 1 : 2;
}

/// Verification accuracy (%) and per-group probe accuracy (%), rows ordered
/// FR first, then prediction rows, then suppression rows; ties keep suite order.
inline Table suite_table(const ResultTable& result) {
  Table t;
  t.title = "Verification accuracy and linear-probe accuracy (%)";
  t.columns.push_back("verification");
  for (auto g : kAllGroups) t.columns.push_back("probe_" + std::string(group_name(g)));
  t.columns.push_back("best_epoch");
  std::vector<std::size_t> order(result.rows.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return row_category(result.rows[a].modes) < row_category(result.rows[b].modes);
  });
  for (auto i : order) {
    const auto& r = result.rows[i];
    TableRow row{r.modes.notation(), {100.0 * r.metrics.verification.mean}};
    for (auto g : kAllGroups) {
      const auto it = r.metrics.probes.find(g);
      row.values.push_back(it == r.metrics.probes.end() ? std::numeric_limits<double>::quiet_NaN()
                                                        : 100.0 * it->second.group_mean);
    }
    row.values.push_back(static_cast<double>(r.best_epoch));
    t.rows.push_back(std::move(row));
  }
  return t;
}

/// Per-fold verification accuracy (%) for a single model.
inline Table fold_table(const std::string& label, const FoldReport& report) {
  Table t;
  t.title = "10-fold verification accuracy (%)";
  for (std::size_t f = 0; f < kNumFolds; ++f) t.columns.push_back("fold" + std::to_string(f));
  t.columns.push_back("mean");
  TableRow row{label, {}};
  for (double a : report.accuracy) row.values.push_back(100.0 * a);
  row.values.push_back(100.0 * report.mean);
  t.rows.push_back(std::move(row));
  return t;
}

// ---------------------------------------------------------------------------
// Attribute-only analysis

struct AttributeOnlyConfig {
  std::size_t train_pairs = 20000;
  std::size_t eval_pairs = 5000;
  std::uint64_t seed = 0;
  PairClassifierOptions verification;
  IdentificationOptions identification;
};

struct AttributeOnlyRow {
  std::string name;
  double verification = 0;  // fraction
  double rank1 = 0;
  double rank5 = 0;
};

/// Verification and closed-set identification from attribute bits alone,
/// per group, for all groups together, and the chance line.
inline std::vector<AttributeOnlyRow> attribute_only_analysis(const SyntheticDataset& ds, const AttributeOnlyConfig& cfg) {
  const auto train_pairs = make_verification_pairs(ds, cfg.train_pairs, derive_seed(cfg.seed, "attr.train_pairs"), Split::train);
  const auto eval_pairs = make_verification_pairs(ds, cfg.eval_pairs, derive_seed(cfg.seed, "attr.eval_pairs"), Split::eval);
  std::vector<std::size_t> ids;
  for (const auto& s : ds.samples) ids.push_back(s.identity);

  std::vector<std::pair<std::string, std::vector<std::size_t>>> sets;
  for (auto g : kAllGroups) {
    auto cols = ds.group_columns(g);
    if (!cols.empty()) sets.emplace_back(std::string(group_name(g)), std::move(cols));
  }
  std::vector<std::size_t> all(ds.num_attributes());
  std::iota(all.begin(), all.end(), std::size_t{0});
  sets.emplace_back("All Groups", all);

  std::vector<AttributeOnlyRow> rows;
  for (const auto& [name, cols] : sets) {
    const auto vectors = attribute_vectors(ds, cols);
    PairClassifierOptions v = cfg.verification;
    v.sgd.seed = derive_seed(cfg.seed, "attr.verification");
    IdentificationOptions id = cfg.identification;
    id.sgd.seed = derive_seed(cfg.seed, "attr.identification");
    const double verif = attribute_only_verification(vectors, train_pairs, eval_pairs, v);
    const auto ident = attribute_only_identification(vectors, ids, id);
    rows.push_back({name, verif, ident.rank1, ident.rank5});
  }
  std::set<std::size_t> distinct(ids.begin(), ids.end());
  const double n = static_cast<double>(distinct.size());
  rows.push_back({"Chance", 0.5, 1.0 / n, std::min(1.0, 5.0 / n)});
  return rows;
}

inline Table attribute_only_table(const std::vector<AttributeOnlyRow>& rows) {
  Table t;
  t.title = "Identity information in attribute annotations (%)";
  t.label_header = "Attributes";
  t.columns = {"verification", "rank1", "rank5"};
  for (const auto& r : rows) t.rows.push_back({r.name, {100.0 * r.verification, 100.0 * r.rank1, 100.0 * r.rank5}});
  return t;
}

}  // namespace attrface
