#include "gcunet/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

namespace gcunet {
namespace {

int64_t parse_i64(const std::string& v, const std::string& key) {
  size_t idx = 0;
  long long r = 0;
  try {
    r = std::stoll(v, &idx);
  } catch (...) {
    fail_config("key " + key + ": '" + v + "' is not an integer");
  }
  if (idx != v.size()) fail_config("key " + key + ": '" + v + "' is not an integer");
  return r;
}

uint64_t parse_u64(const std::string& v, const std::string& key) {
  size_t idx = 0;
  unsigned long long r = 0;
  try {
    r = std::stoull(v, &idx);
  } catch (...) {
    fail_config("key " + key + ": '" + v + "' is not a non-negative integer");
  }
  if (idx != v.size() || v[0] == '-')
    fail_config("key " + key + ": '" + v + "' is not a non-negative integer");
  return r;
}

double parse_f64(const std::string& v, const std::string& key) {
  size_t idx = 0;
  double r = 0;
  try {
    r = std::stod(v, &idx);
  } catch (...) {
    fail_config("key " + key + ": '" + v + "' is not a number");
  }
  if (idx != v.size()) fail_config("key " + key + ": '" + v + "' is not a number");
  return r;
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "0" || v == "false") return false;
  if (v == "1" || v == "true") return true;
  fail_config("key " + key + ": '" + v + "' is not a boolean (use 0/1/true/false)");
}

std::vector<int64_t> parse_list(const std::string& v, const std::string& key) {
  std::vector<int64_t> out;
  std::string item;
  std::istringstream ss(v);
  while (std::getline(ss, item, ',')) out.push_back(parse_i64(item, key));
  if (out.empty()) fail_config("key " + key + ": empty list");
  return out;
}

std::string fmt_f64(double d) {
  char b[40];
  std::snprintf(b, sizeof(b), "%.17g", d);
  return b;
}

std::string fmt_list(const std::vector<int64_t>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

struct Field {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

// alphabetical; serialize_config emits them in this order
const std::vector<Field>& fields() {
  static const std::vector<Field> rows = {
      {"augment", [](RunConfig& c, const std::string& v) { c.train.augment = parse_bool(v, "augment"); },
       [](const RunConfig& c) { return std::string(c.train.augment ? "1" : "0"); }},
      {"batch_size", [](RunConfig& c, const std::string& v) { c.train.batch_size = parse_i64(v, "batch_size"); },
       [](const RunConfig& c) { return std::to_string(c.train.batch_size); }},
      {"beta1", [](RunConfig& c, const std::string& v) { c.train.beta1 = parse_f64(v, "beta1"); },
       [](const RunConfig& c) { return fmt_f64(c.train.beta1); }},
      {"beta2", [](RunConfig& c, const std::string& v) { c.train.beta2 = parse_f64(v, "beta2"); },
       [](const RunConfig& c) { return fmt_f64(c.train.beta2); }},
      {"clip_norm", [](RunConfig& c, const std::string& v) { c.train.clip_norm = parse_f64(v, "clip_norm"); },
       [](const RunConfig& c) { return fmt_f64(c.train.clip_norm); }},
      {"depths", [](RunConfig& c, const std::string& v) { c.model.depths = parse_list(v, "depths"); },
       [](const RunConfig& c) { return fmt_list(c.model.depths); }},
      {"drop_rate", [](RunConfig& c, const std::string& v) { c.model.drop_rate = parse_f64(v, "drop_rate"); },
       [](const RunConfig& c) { return fmt_f64(c.model.drop_rate); }},
      {"droppath_rate", [](RunConfig& c, const std::string& v) { c.model.droppath_rate = parse_f64(v, "droppath_rate"); },
       [](const RunConfig& c) { return fmt_f64(c.model.droppath_rate); }},
      {"embed_dim", [](RunConfig& c, const std::string& v) { c.model.embed_dim = parse_i64(v, "embed_dim"); },
       [](const RunConfig& c) { return std::to_string(c.model.embed_dim); }},
      {"eps", [](RunConfig& c, const std::string& v) { c.train.eps = parse_f64(v, "eps"); },
       [](const RunConfig& c) { return fmt_f64(c.train.eps); }},
      {"eval_every", [](RunConfig& c, const std::string& v) { c.train.eval_every = parse_i64(v, "eval_every"); },
       [](const RunConfig& c) { return std::to_string(c.train.eval_every); }},
      {"heads", [](RunConfig& c, const std::string& v) { c.model.heads = parse_list(v, "heads"); },
       [](const RunConfig& c) { return fmt_list(c.model.heads); }},
      {"img_size", [](RunConfig& c, const std::string& v) { c.model.img_size = parse_i64(v, "img_size"); },
       [](const RunConfig& c) { return std::to_string(c.model.img_size); }},
      {"in_channels", [](RunConfig& c, const std::string& v) { c.model.in_channels = parse_i64(v, "in_channels"); },
       [](const RunConfig& c) { return std::to_string(c.model.in_channels); }},
      {"init_seed", [](RunConfig& c, const std::string& v) { c.model.seed = parse_u64(v, "init_seed"); },
       [](const RunConfig& c) { return std::to_string(c.model.seed); }},
      {"learning_rate", [](RunConfig& c, const std::string& v) { c.train.learning_rate = parse_f64(v, "learning_rate"); },
       [](const RunConfig& c) { return fmt_f64(c.train.learning_rate); }},
      {"max_epochs", [](RunConfig& c, const std::string& v) { c.train.max_epochs = parse_i64(v, "max_epochs"); },
       [](const RunConfig& c) { return std::to_string(c.train.max_epochs); }},
      {"mlp_ratio", [](RunConfig& c, const std::string& v) { c.model.mlp_ratio = parse_i64(v, "mlp_ratio"); },
       [](const RunConfig& c) { return std::to_string(c.model.mlp_ratio); }},
      {"num_classes", [](RunConfig& c, const std::string& v) { c.model.num_classes = parse_i64(v, "num_classes"); },
       [](const RunConfig& c) { return std::to_string(c.model.num_classes); }},
      {"patience", [](RunConfig& c, const std::string& v) { c.train.patience = parse_i64(v, "patience"); },
       [](const RunConfig& c) { return std::to_string(c.train.patience); }},
      {"se_reduction", [](RunConfig& c, const std::string& v) { c.model.se_reduction = parse_i64(v, "se_reduction"); },
       [](const RunConfig& c) { return std::to_string(c.model.se_reduction); }},
      {"seed", [](RunConfig& c, const std::string& v) { c.train.seed = parse_u64(v, "seed"); },
       [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      {"upsample", [](RunConfig& c, const std::string& v) { c.model.upsample = v; },
       [](const RunConfig& c) { return c.model.upsample; }},
      {"w_ce", [](RunConfig& c, const std::string& v) { c.train.loss.w_ce = parse_f64(v, "w_ce"); },
       [](const RunConfig& c) { return fmt_f64(c.train.loss.w_ce); }},
      {"w_dice", [](RunConfig& c, const std::string& v) { c.train.loss.w_dice = parse_f64(v, "w_dice"); },
       [](const RunConfig& c) { return fmt_f64(c.train.loss.w_dice); }},
      {"weight_decay", [](RunConfig& c, const std::string& v) { c.train.weight_decay = parse_f64(v, "weight_decay"); },
       [](const RunConfig& c) { return fmt_f64(c.train.weight_decay); }},
      {"windows", [](RunConfig& c, const std::string& v) { c.model.windows = parse_list(v, "windows"); },
       [](const RunConfig& c) { return fmt_list(c.model.windows); }},
  };
  return rows;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields())
    if (key == f.name) return &f;
  return nullptr;
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  RunConfig c;
  std::vector<std::string> errs;
  std::vector<std::string> seen;
  std::istringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos) {
      errs.push_back(origin + ":" + std::to_string(lineno) + ": expected key=value, got '" + t +
                     "'");
      continue;
    }
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    const Field* f = find_field(key);
    if (!f) {
      errs.push_back(origin + ":" + std::to_string(lineno) + ": unknown key '" + key + "'");
      continue;
    }
    if (std::find(seen.begin(), seen.end(), key) != seen.end()) {
      errs.push_back(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
      continue;
    }
    seen.push_back(key);
    try {
      f->set(c, value);
    } catch (const Error& e) {
      errs.push_back(origin + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!errs.empty()) {
    std::string all = "configuration errors:";
    for (const auto& e : errs) all += "\n  - " + e;
    fail_config(all);
  }
  return c;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorKind::io, "cannot open config file: " + path);
  std::stringstream buf;
  buf << f.rdbuf();
  return parse_config_text(buf.str(), path);
}

std::string serialize_config(const RunConfig& c) {
  std::string out;
  for (const auto& f : fields()) {
    out += f.name;
    out += '=';
    out += f.get(c);
    out += '\n';
  }
  return out;
}

void apply_override(RunConfig& c, const std::string& key, const std::string& value) {
  const Field* f = find_field(key);
  if (!f) fail_config("unknown config key '" + key + "'");
  f->set(c, value);
}

}  // namespace gcunet
