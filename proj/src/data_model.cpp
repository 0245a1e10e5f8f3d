#include "cqlearn/data_model.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace cqlearn {

namespace {

using json = nlohmann::json;

std::string trim(std::string_view s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  std::size_t e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

// Minimal CSV field splitter; handles double-quoted fields with "" escapes.
std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(trim(cur));
  return fields;
}

bool parse_double(const std::string& s, double& out) {
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  return ec == std::errc() && ptr == last;
}

std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  (void)ec;
  return std::string(buf, ptr);
}

bool is_absent_code(const std::string& s) {
  return s.empty() || s == "NA" || s == "na" || s == "NaN";
}

}  // namespace

// ----------------------------------------------------------------------------
// ClusteredDataset
// ----------------------------------------------------------------------------

long ClusteredDataset::n_individuals() const {
  long n = 0;
  for (const auto& c : clusters) n += c.size();
  return n;
}

int ClusteredDataset::stage_count(int k) const {
  if (k < 1 || k > n_stages()) throw usage_error("stage out of range");
  int n = 0;
  for (const auto& c : clusters)
    if (c.treatments[k - 1].assigned) ++n;
  return n;
}

int ClusteredDataset::covariate_index(std::string_view name) const {
  auto it = std::find(covariate_names.begin(), covariate_names.end(), name);
  if (it == covariate_names.end()) return -1;
  return static_cast<int>(it - covariate_names.begin());
}

int ClusteredDataset::treatment_stage(std::string_view name) const {
  for (std::size_t k = 0; k < treatment_names.size(); ++k)
    if (treatment_names[k] == name) return static_cast<int>(k + 1);
  return 0;
}

void ClusteredDataset::validate() const {
  const int K = n_stages();
  std::set<std::string> ids;
  for (const auto& c : clusters) {
    if (c.size() < 1)
      throw integrity_error("cluster '" + c.cluster_id + "' has no individuals");
    if (!ids.insert(c.cluster_id).second)
      throw integrity_error("duplicate cluster id '" + c.cluster_id + "'");
    if (static_cast<int>(c.treatments.size()) != K)
      throw integrity_error("cluster '" + c.cluster_id + "' has wrong stage count");
    if (c.covariates.size() != covariate_names.size())
      throw integrity_error("cluster '" + c.cluster_id + "' has wrong covariate count");
    for (double v : c.covariates)
      if (!std::isfinite(v))
        throw domain_error("non-finite covariate in cluster '" + c.cluster_id + "'");
    for (double v : c.outcomes)
      if (!std::isfinite(v))
        throw domain_error("non-finite outcome in cluster '" + c.cluster_id + "'");
    for (const auto& t : c.treatments)
      if (t.assigned && t.value != -1 && t.value != 1)
        throw domain_error("treatment value outside {-1,+1} in cluster '" +
                           c.cluster_id + "'");
  }
  if (K >= 1 && stage_count(K) < 2)
    throw integrity_error("fewer than 2 clusters randomized at the final stage");
}

// ----------------------------------------------------------------------------
// Model spec JSON
// ----------------------------------------------------------------------------

ModelSpec parse_model_spec_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw schema_error(std::string("model spec is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("stages") || !doc["stages"].is_array() ||
      doc["stages"].empty())
    throw schema_error("model spec must contain a non-empty 'stages' array");

  ModelSpec spec;
  int k = 0;
  for (const auto& st : doc["stages"]) {
    StageModelSpec s;
    s.stage = ++k;
    if (st.contains("main_effects"))
      for (const auto& n : st["main_effects"]) s.main_effect_columns.push_back(n.get<std::string>());
    if (st.contains("tailoring"))
      for (const auto& n : st["tailoring"]) s.tailoring_columns.push_back(n.get<std::string>());
    for (const auto& n : s.tailoring_columns)
      if (std::find(s.main_effect_columns.begin(), s.main_effect_columns.end(), n) !=
          s.main_effect_columns.end())
        throw schema_error("stage " + std::to_string(k) + ": column '" + n +
                           "' appears in both main_effects and tailoring");
    spec.stages.push_back(std::move(s));
  }

  auto& m = spec.manifest;
  if (doc.contains("cluster_id_column")) m.cluster_id_column = doc["cluster_id_column"].get<std::string>();
  if (doc.contains("outcome_column")) m.outcome_column = doc["outcome_column"].get<std::string>();
  if (doc.contains("treatment_columns")) {
    for (const auto& n : doc["treatment_columns"]) m.treatment_columns.push_back(n.get<std::string>());
    if (static_cast<int>(m.treatment_columns.size()) != spec.n_stages())
      throw schema_error("treatment_columns length must equal the number of stages");
  } else {
    for (int i = 1; i <= spec.n_stages(); ++i)
      m.treatment_columns.push_back("a" + std::to_string(i));
  }
  return spec;
}

ModelSpec load_model_spec(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw schema_error("cannot open model spec '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_model_spec_json(ss.str());
}

// ----------------------------------------------------------------------------
// CSV ingestion
// ----------------------------------------------------------------------------

ClusteredDataset parse_csv(const std::string& text, const ModelSpec& spec) {
  const ColumnManifest& man = spec.manifest;
  const int K = spec.n_stages();

  std::vector<std::string> lines;
  {
    std::string cur;
    for (char c : text) {
      if (c == '\n') {
        lines.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!cur.empty()) lines.push_back(cur);
  }
  if (lines.empty()) throw schema_error("empty CSV file");

  const std::vector<std::string> header = split_csv_line(lines[0]);
  auto col_of = [&](const std::string& name) -> int {
    auto it = std::find(header.begin(), header.end(), name);
    return it == header.end() ? -1 : static_cast<int>(it - header.begin());
  };

  const int id_col = col_of(man.cluster_id_column);
  if (id_col < 0)
    throw schema_error("line 1: missing cluster id column '" + man.cluster_id_column + "'");
  const int y_col = col_of(man.outcome_column);
  if (y_col < 0)
    throw schema_error("line 1: missing outcome column '" + man.outcome_column + "'");
  std::vector<int> treat_cols;
  for (const auto& name : man.treatment_columns) {
    int c = col_of(name);
    if (c < 0) throw schema_error("line 1: missing treatment column '" + name + "'");
    treat_cols.push_back(c);
  }

  // every remaining column is a cluster-level covariate
  std::vector<int> cov_cols;
  std::vector<std::string> cov_names;
  for (int c = 0; c < static_cast<int>(header.size()); ++c) {
    if (c == id_col || c == y_col) continue;
    if (std::find(treat_cols.begin(), treat_cols.end(), c) != treat_cols.end()) continue;
    if (header[c].empty()) throw schema_error("line 1: empty column name");
    cov_cols.push_back(c);
    cov_names.push_back(header[c]);
  }
  {
    std::set<std::string> uniq(header.begin(), header.end());
    if (uniq.size() != header.size()) throw schema_error("line 1: duplicate column names");
  }

  // covariates stored in sorted-name order
  std::vector<std::size_t> order(cov_names.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return cov_names[a] < cov_names[b]; });

  ClusteredDataset ds;
  for (std::size_t i : order) ds.covariate_names.push_back(cov_names[i]);
  ds.treatment_names = man.treatment_columns;
  ds.outcome_name = man.outcome_column;
  ds.id_name = man.cluster_id_column;

  struct Partial {
    ClusterRecord rec;
    long first_line = 0;
  };
  std::map<std::string, Partial> by_id;

  for (std::size_t li = 1; li < lines.size(); ++li) {
    const long line_no = static_cast<long>(li) + 1;
    if (trim(lines[li]).empty()) continue;
    const auto fields = split_csv_line(lines[li]);
    if (fields.size() != header.size())
      throw schema_error("line " + std::to_string(line_no) + ": expected " +
                         std::to_string(header.size()) + " fields, found " +
                         std::to_string(fields.size()));

    const std::string id = fields[id_col];
    if (id.empty())
      throw schema_error("line " + std::to_string(line_no) + ": empty cluster id");

    double y;
    if (!parse_double(fields[y_col], y) || !std::isfinite(y))
      throw domain_error("line " + std::to_string(line_no) + ": outcome '" +
                         fields[y_col] + "' is not a finite number");

    std::vector<StageTreatment> treatments(K);
    for (int k = 0; k < K; ++k) {
      const std::string& f = fields[treat_cols[k]];
      if (is_absent_code(f)) {
        treatments[k] = StageTreatment::absent(AbsentReason::responder_excluded);
        continue;
      }
      double v;
      if (!parse_double(f, v) || (v != -1.0 && v != 1.0))
        throw domain_error("line " + std::to_string(line_no) + ": treatment '" + f +
                           "' must be -1, 1 or NA");
      treatments[k] = StageTreatment::present(static_cast<int>(v));
    }

    std::vector<double> covs(order.size());
    for (std::size_t j = 0; j < order.size(); ++j) {
      const std::string& f = fields[cov_cols[order[j]]];
      double v;
      if (!parse_double(f, v) || !std::isfinite(v))
        throw domain_error("line " + std::to_string(line_no) + ": covariate '" +
                           ds.covariate_names[j] + "' value '" + f +
                           "' is not a finite number");
      covs[j] = v;
    }

    auto it = by_id.find(id);
    if (it == by_id.end()) {
      Partial p;
      p.first_line = line_no;
      p.rec.cluster_id = id;
      p.rec.covariates = std::move(covs);
      p.rec.treatments = std::move(treatments);
      p.rec.outcomes.push_back(y);
      by_id.emplace(id, std::move(p));
    } else {
      ClusterRecord& rec = it->second.rec;
      for (std::size_t j = 0; j < covs.size(); ++j)
        if (covs[j] != rec.covariates[j])
          throw integrity_error("line " + std::to_string(line_no) + ": covariate '" +
                                ds.covariate_names[j] + "' differs within cluster '" +
                                id + "' (first seen line " +
                                std::to_string(it->second.first_line) + ")");
      for (int k = 0; k < K; ++k) {
        const auto& a = treatments[k];
        const auto& b = rec.treatments[k];
        if (a.assigned != b.assigned || (a.assigned && a.value != b.value))
          throw integrity_error("line " + std::to_string(line_no) + ": treatment '" +
                                man.treatment_columns[k] + "' differs within cluster '" +
                                id + "'");
      }
      rec.outcomes.push_back(y);
    }
  }

  if (by_id.empty()) throw schema_error("CSV contains no data rows");
  for (auto& [id, p] : by_id) ds.clusters.push_back(std::move(p.rec));  // map => sorted ids

  ds.validate();
  return ds;
}

ClusteredDataset load_csv(const std::string& path, const ModelSpec& spec) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw schema_error("cannot open data file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str(), spec);
}

std::string to_csv(const ClusteredDataset& ds) {
  std::string out = ds.id_name + "," + ds.outcome_name;
  for (const auto& t : ds.treatment_names) out += "," + t;
  for (const auto& c : ds.covariate_names) out += "," + c;
  out += "\n";
  for (const auto& rec : ds.clusters) {
    for (double y : rec.outcomes) {
      out += rec.cluster_id + "," + format_double(y);
      for (const auto& t : rec.treatments)
        out += t.assigned ? "," + std::to_string(t.value) : ",NA";
      for (double v : rec.covariates) out += "," + format_double(v);
      out += "\n";
    }
  }
  return out;
}

void write_csv(const ClusteredDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw schema_error("cannot write '" + path + "'");
  out << to_csv(ds);
}

bool datasets_equal(const ClusteredDataset& a, const ClusteredDataset& b) {
  if (a.covariate_names != b.covariate_names || a.treatment_names != b.treatment_names)
    return false;
  if (a.clusters.size() != b.clusters.size()) return false;
  for (std::size_t i = 0; i < a.clusters.size(); ++i) {
    const auto& x = a.clusters[i];
    const auto& y = b.clusters[i];
    if (x.cluster_id != y.cluster_id || x.covariates != y.covariates ||
        x.outcomes != y.outcomes)
      return false;
    for (std::size_t k = 0; k < x.treatments.size(); ++k) {
      if (x.treatments[k].assigned != y.treatments[k].assigned) return false;
      if (x.treatments[k].assigned && x.treatments[k].value != y.treatments[k].value)
        return false;
    }
  }
  return true;
}

// ----------------------------------------------------------------------------
// Design matrices
// ----------------------------------------------------------------------------

double resolve_column(const ClusteredDataset& ds, const ClusterRecord& rec,
                      const std::string& name, int stage) {
  int ci = ds.covariate_index(name);
  if (ci >= 0) return rec.covariates[ci];
  int ts = ds.treatment_stage(name);
  if (ts > 0) {
    if (ts >= stage)
      throw schema_error("column '" + name + "' refers to treatment at stage " +
                         std::to_string(ts) + ", not part of stage-" +
                         std::to_string(stage) + " history");
    const auto& t = rec.treatments[ts - 1];
    if (!t.assigned)
      throw integrity_error("cluster '" + rec.cluster_id + "' lacks treatment '" +
                            name + "' required by the stage-" +
                            std::to_string(stage) + " model");
    return static_cast<double>(t.value);
  }
  throw schema_error("unknown column '" + name + "'");
}

StageLayout stage_layout(const ClusteredDataset& ds, const StageModelSpec& spec) {
  StageLayout lay;
  lay.n_main = static_cast<int>(spec.main_effect_columns.size());
  lay.n_tailor = 1 + static_cast<int>(spec.tailoring_columns.size());
  const std::string a =
      spec.stage >= 1 && spec.stage <= ds.n_stages()
          ? ds.treatment_names[spec.stage - 1]
          : "a" + std::to_string(spec.stage);
  for (const auto& n : spec.main_effect_columns) lay.labels.push_back(n);
  lay.labels.push_back("(Intercept)");
  for (const auto& n : spec.tailoring_columns) lay.labels.push_back(n);
  lay.labels.push_back(a);
  for (const auto& n : spec.tailoring_columns) lay.labels.push_back(a + ":" + n);
  return lay;
}

Eigen::VectorXd main_effect_values(const ClusteredDataset& ds, const ClusterRecord& rec,
                                   const StageModelSpec& spec) {
  Eigen::VectorXd h0(spec.main_effect_columns.size());
  for (std::size_t j = 0; j < spec.main_effect_columns.size(); ++j)
    h0[j] = resolve_column(ds, rec, spec.main_effect_columns[j], spec.stage);
  return h0;
}

Eigen::VectorXd tailoring_values(const ClusteredDataset& ds, const ClusterRecord& rec,
                                 const StageModelSpec& spec) {
  Eigen::VectorXd h1(1 + spec.tailoring_columns.size());
  h1[0] = 1.0;
  for (std::size_t j = 0; j < spec.tailoring_columns.size(); ++j)
    h1[j + 1] = resolve_column(ds, rec, spec.tailoring_columns[j], spec.stage);
  return h1;
}

std::vector<DesignBlock> design_matrices(const ClusteredDataset& ds,
                                         const StageModelSpec& spec, int k) {
  if (k < 1 || k > ds.n_stages()) throw usage_error("stage out of range");
  if (k != spec.stage) throw usage_error("stage does not match the model spec");
  const StageLayout lay = stage_layout(ds, spec);
  const int p = lay.n_params();

  std::vector<DesignBlock> blocks;
  blocks.reserve(ds.clusters.size());
  int n_included = 0;
  for (const auto& rec : ds.clusters) {
    DesignBlock blk;
    blk.included = rec.treatments[k - 1].assigned;
    if (blk.included) {
      const Eigen::VectorXd h0 = main_effect_values(ds, rec, spec);
      const Eigen::VectorXd h1 = tailoring_values(ds, rec, spec);
      const double a = static_cast<double>(rec.treatments[k - 1].value);
      Eigen::RowVectorXd row(p);
      row << h0.transpose(), h1.transpose(), a * h1.transpose();
      blk.X = row.replicate(rec.size(), 1);
      blk.y = Eigen::Map<const Eigen::VectorXd>(rec.outcomes.data(), rec.size());
      ++n_included;
    }
    blocks.push_back(std::move(blk));
  }
  if (n_included == 0)
    throw insufficient_data_error("no cluster included at stage " + std::to_string(k));
  return blocks;
}

}  // namespace cqlearn
