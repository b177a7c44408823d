#include "cli.hpp"

#include "metadistil/error.hpp"
#include "metadistil/io.hpp"
#include "metadistil/rng.hpp"

#include <CLI11.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace metadistil::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

// ---------------------------------------------------------------------------
// Config reading

const std::map<std::string, std::set<std::string>> kKnownKeys = {
    {"data",
     {"generator", "per_class", "classes", "radius", "spread", "turns", "noise", "path", "dev_fraction",
      "test_fraction", "quiz_fraction", "seed"}},
    {"teacher", {"layers", "pretrain_steps", "pretrain_lr", "snapshot"}},
    {"student", {"layers"}},
    {"distill",
     {"mode", "alpha", "kd_kind", "temperature", "lambda", "mu", "batch_size", "quiz_batch_size", "steps",
      "eval_interval", "seed", "grad_clip", "probe_size", "snapshot_steps"}},
    {"sweep", {"parameter", "values", "seeds", "workers", "static_snapshot", "cross_snapshot"}},
    {"output", {"directory"}},
};

const std::set<std::string> kSweepParameters = {"alpha", "temperature", "student_layers", "mode"};

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (ch == ',' || ch == ' ' || ch == '\t' || ch == ';') {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

MlpSpec parse_layers(const std::string& text, const std::string& key) {
  MlpSpec spec;
  std::string normalized = text;
  std::replace(normalized.begin(), normalized.end(), '-', ',');
  for (const auto& w : split_list(normalized)) {
    long long v = 0;
    try {
      v = io::parse_int(w);
    } catch (const FormatError&) {
      throw ConfigError(key + ": '" + text + "' is not a list of layer widths");
    }
    if (v <= 0) throw ConfigError(key + ": layer widths must be positive, got '" + text + "'");
    spec.layers.push_back(static_cast<std::size_t>(v));
  }
  if (spec.layers.size() < 2) throw ConfigError(key + ": needs at least an input and an output width");
  return spec;
}

std::string layers_value(const MlpSpec& spec) {
  std::string out;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) out += (i ? "-" : "") + std::to_string(spec.layers[i]);
  return out;
}

// Reads typed values from one section, naming the key in every error.
class Section {
 public:
  Section(std::string name, const boost::property_tree::ptree* tree) : name_(std::move(name)), tree_(tree) {}

  bool has(const std::string& key) const { return tree_ && tree_->find(key) != tree_->not_found(); }

  std::string raw(const std::string& key) const { return io::trim(tree_->get<std::string>(key)); }

  std::string require(const std::string& key) const {
    if (!has(key)) throw ConfigError("missing required key '" + key + "' in [" + name_ + "]");
    return raw(key);
  }

  double real(const std::string& key, double fallback, double lo, double hi, bool open_lo = false) const {
    if (!has(key)) return fallback;
    double v = 0.0;
    try {
      v = io::parse_double(raw(key));
    } catch (const FormatError&) {
      throw ConfigError(key + ": '" + raw(key) + "' is not a number");
    }
    if (!std::isfinite(v) || (open_lo ? v <= lo : v < lo) || v > hi) {
      throw ConfigError(key + " = " + raw(key) + " is out of range " + (open_lo ? "(" : "[") + io::format_double(lo) +
                        ", " + io::format_double(hi) + "]");
    }
    return v;
  }

  std::size_t count(const std::string& key, std::size_t fallback, std::size_t lo = 0) const {
    if (!has(key)) return fallback;
    long long v = 0;
    try {
      v = io::parse_int(raw(key));
    } catch (const FormatError&) {
      throw ConfigError(key + ": '" + raw(key) + "' is not an integer");
    }
    if (v < static_cast<long long>(lo)) {
      throw ConfigError(key + " = " + raw(key) + " must be at least " + std::to_string(lo));
    }
    return static_cast<std::size_t>(v);
  }

  std::uint64_t seed(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    return parse_seed(raw(key), key);
  }

  static std::uint64_t parse_seed(const std::string& text, const std::string& key) {
    std::uint64_t v = 0;
    auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc{} || end != text.data() + text.size()) {
      throw ConfigError(key + ": '" + text + "' is not a non-negative integer seed");
    }
    return v;
  }

 private:
  std::string name_;
  const boost::property_tree::ptree* tree_;
};

fs::path output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env && *env ? fs::path(env) : fs::path("runs");
}

void require_snapshot_for(Mode mode, const fs::path& snapshot, const char* key) {
  if ((mode == Mode::static_kd || mode == Mode::cross_teach) && snapshot.empty()) {
    throw ConfigError("mode " + to_string(mode) + " needs a teacher snapshot: set '" + key + "'");
  }
}

fs::path snapshot_for(const ExperimentFile& config, Mode mode) {
  if (config.sweep) {
    if (mode == Mode::static_kd && !config.sweep->static_snapshot.empty()) return config.sweep->static_snapshot;
    if (mode == Mode::cross_teach && !config.sweep->cross_snapshot.empty()) return config.sweep->cross_snapshot;
  }
  return config.snapshot;
}

// ---------------------------------------------------------------------------
// Output helpers

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Collects written files relative to a run root.
class Writer {
 public:
  explicit Writer(fs::path root) : root_(std::move(root)) {}

  void write(const fs::path& relative, std::string_view content) {
    io::write_atomic(root_ / relative, content);
    std::lock_guard lock(mutex_);
    files_.push_back(relative.generic_string());
  }

  void snapshot(const fs::path& relative, const TeacherSnapshot& snap) {
    save_snapshot(snap, root_ / relative);
    std::lock_guard lock(mutex_);
    files_.push_back(relative.generic_string());
    files_.push_back(relative.generic_string() + ".meta");
  }

  void record(const fs::path& relative) {
    std::lock_guard lock(mutex_);
    files_.push_back(relative.generic_string());
  }

  std::vector<std::string> files() const {
    std::vector<std::string> out = files_;
    std::sort(out.begin(), out.end());
    return out;
  }
  const fs::path& root() const { return root_; }

 private:
  fs::path root_;
  std::mutex mutex_;
  std::vector<std::string> files_;
};

void write_manifest(const fs::path& dir, const RunManifest& m) {
  ordered_json j;
  j["format_version"] = m.format_version;
  j["started_at"] = m.started_at;
  j["finished_at"] = m.finished_at;
  j["files"] = m.files;
  j["config"] = m.config;
  io::write_atomic(dir / "manifest.json", j.dump(2) + "\n");
}

// All artifacts of one finished run, under `prefix` inside the writer's root.
void write_run(Writer& w, const fs::path& prefix, const ExperimentFile& config, const SplitSet& splits,
               const TrainingResult& r) {
  const DistillConfig& c = config.distill;
  w.write(prefix / "config.ini", to_ini(config));
  w.write(prefix / "steps.csv", steps_to_csv(r.log.steps));
  w.write(prefix / "dynamics.csv", evals_to_csv(r.log.evals));

  auto summary = ordered_json::parse(summary_json(r.log));
  summary["teacher_layers"] = to_string(c.teacher_spec);
  summary["student_layers"] = to_string(c.student_spec);
  const Tensor s_test = forward(c.student_spec, r.student, splits.test.features);
  summary["loyalty_final_teacher"] = loyalty(s_test, forward(c.teacher_spec, r.teacher, splits.test.features));
  summary["loyalty_initial_teacher"] =
      loyalty(s_test, forward(c.teacher_spec, r.initial_teacher, splits.test.features));
  w.write(prefix / "summary.json", summary.dump(2) + "\n");

  const Provenance start{c.mode, 0, c.seed, c.student_spec};
  w.snapshot(prefix / "teacher_initial.bin", {c.teacher_spec, r.initial_teacher, start});
  w.snapshot(prefix / "teacher.bin", {c.teacher_spec, r.teacher, {c.mode, c.steps, c.seed, c.student_spec}});
  for (const auto& [step, params] : r.log.teacher_snapshots) {
    w.snapshot(prefix / ("teacher_step" + std::to_string(step) + ".bin"),
               {c.teacher_spec, params, {c.mode, step, c.seed, c.student_spec}});
  }
  w.write(prefix / "student.bin", encode_snapshot(c.student_spec, r.student));
}

std::optional<TeacherSnapshot> load_optional_snapshot(const fs::path& path) {
  if (path.empty()) return std::nullopt;
  return load_snapshot(path);
}

// ---------------------------------------------------------------------------
// Meta-gradient oracle instances

struct Instance {
  DistillConfig config;
  Tensor batch, quiz;
  Labels labels, quiz_labels;
  ParamSet student, teacher;
};

Tensor uniform(Rng& rng, const Shape& shape, double lo, double hi) {
  std::vector<Scalar> v(shape_size(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, v);
}

ParamSet random_params(Rng& rng, const MlpSpec& spec) {
  const ParamSet like = init_params(spec, 0);
  std::vector<Tensor> values;
  for (const auto& [name, t] : like.entries) values.push_back(uniform(rng, t.shape(), -1.0, 1.0));
  return like.with_values(std::move(values));
}

double kink_margin(const MlpSpec& spec, const ParamSet& p, const Tensor& x) {
  Matrix h = x.matrix();
  double margin = INFINITY;
  for (std::size_t l = 0; l + 1 < spec.layer_count(); ++l) {
    Matrix pre = h * p[2 * l].matrix();
    pre.rowwise() += p[2 * l + 1].matrix().row(0);
    margin = std::min(margin, pre.cwiseAbs().minCoeff());
    h = pre.cwiseMax(0.0);
  }
  return margin;
}

Instance random_instance(Rng& rng, KdLoss kd, Scalar alpha, bool zero_lambda) {
  while (true) {
    Instance m;
    const std::size_t d = 2 + rng.below(3), c = 2 + rng.below(3);
    m.config.teacher_spec = MlpSpec{{d, 1 + rng.below(4), c}};
    m.config.student_spec = MlpSpec{{d, 1 + rng.below(4), c}};
    m.config.kd = kd;
    m.config.alpha = alpha;
    m.config.lambda = zero_lambda ? 0.0 : rng.uniform(0.05, 0.5);
    m.config.mu = 0.1;
    const std::size_t n = 1 + rng.below(4), nq = 1 + rng.below(4);
    m.batch = uniform(rng, {n, d}, -2.0, 2.0);
    m.quiz = uniform(rng, {nq, d}, -2.0, 2.0);
    for (std::size_t i = 0; i < n; ++i) m.labels.push_back(static_cast<int>(rng.below(c)));
    for (std::size_t i = 0; i < nq; ++i) m.quiz_labels.push_back(static_cast<int>(rng.below(c)));
    m.student = random_params(rng, m.config.student_spec);
    m.teacher = random_params(rng, m.config.teacher_spec);
    const ParamSet next = inner_update(m.config, m.batch, m.labels, m.student, m.teacher, false).params;
    const double margin = std::min({kink_margin(m.config.teacher_spec, m.teacher, m.batch),
                                    kink_margin(m.config.student_spec, m.student, m.batch),
                                    kink_margin(m.config.student_spec, next, m.quiz)});
    if (margin > 1e-3) return m;
  }
}

}  // namespace

// ---------------------------------------------------------------------------

ExperimentFile parse_config_text(const std::string& text, const fs::path& source) {
  // Inline comments start at whitespace followed by '#' or ';'.
  std::string stripped;
  {
    std::istringstream lines(text);
    for (std::string line; std::getline(lines, line);) {
      for (std::size_t i = 1; i < line.size(); ++i) {
        if ((line[i] == '#' || line[i] == ';') && (line[i - 1] == ' ' || line[i - 1] == '\t')) {
          line.erase(i);
          break;
        }
      }
      stripped += line + '\n';
    }
  }
  boost::property_tree::ptree tree;
  try {
    std::istringstream in(stripped);
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("cannot parse config: " + e.message() + " (line " + std::to_string(e.line()) + ")");
  }
  for (const auto& [section, body] : tree) {
    const auto known = kKnownKeys.find(section);
    if (known == kKnownKeys.end()) {
      if (body.empty()) throw ConfigError("key '" + section + "' outside any section");
      throw ConfigError("unknown section [" + section + "]");
    }
    for (const auto& [key, value] : body) {
      if (!known->second.count(key)) throw ConfigError("unknown key '" + key + "' in [" + section + "]");
    }
  }
  const auto section = [&](const std::string& name) {
    const auto it = tree.find(name);
    return Section(name, it == tree.not_found() ? nullptr : &it->second);
  };

  ExperimentFile out;
  out.source = source;

  const Section data = section("data");
  DataSection& d = out.data;
  if (data.has("generator")) d.generator = data.raw("generator");
  if (d.generator != "blobs" && d.generator != "spirals" && d.generator != "csv") {
    throw ConfigError("generator: expected blobs, spirals or csv, got '" + d.generator + "'");
  }
  d.per_class = data.count("per_class", d.per_class, 1);
  d.classes = data.count("classes", d.generator == "spirals" ? 2 : d.classes, 2);
  if (d.generator == "spirals" && d.classes != 2) throw ConfigError("classes: spirals always have 2 classes");
  d.radius = data.real("radius", d.radius, 0.0, 1e6, true);
  d.spread = data.real("spread", d.spread, 0.0, 1e6, true);
  d.turns = data.real("turns", d.turns, 0.0, 1e3, true);
  d.noise = data.real("noise", d.noise, 0.0, 1e6);
  if (data.has("path")) d.path = data.raw("path");
  if (d.generator == "csv" && d.path.empty()) throw ConfigError("missing required key 'path' in [data] for csv data");
  d.dev_fraction = data.real("dev_fraction", d.dev_fraction, 0.0, 1.0, true);
  d.test_fraction = data.real("test_fraction", d.test_fraction, 0.0, 1.0, true);
  if (d.dev_fraction + d.test_fraction >= 1.0) throw ConfigError("dev_fraction + test_fraction must be below 1");
  d.seed = data.seed("seed", d.seed);

  DistillConfig& c = out.distill;
  c.quiz_fraction = data.real("quiz_fraction", c.quiz_fraction, 0.0, 1.0, true);
  if (c.quiz_fraction >= 1.0) throw ConfigError("quiz_fraction = 1 leaves no training data");

  const Section teacher = section("teacher");
  c.teacher_spec = parse_layers(teacher.require("layers"), "layers");
  c.teacher_pretrain_steps = teacher.count("pretrain_steps", c.teacher_pretrain_steps);
  c.teacher_pretrain_lr = teacher.real("pretrain_lr", c.teacher_pretrain_lr, 0.0, 1e6, true);
  if (teacher.has("snapshot")) out.snapshot = teacher.raw("snapshot");

  c.student_spec = parse_layers(section("student").require("layers"), "layers");

  const Section distill = section("distill");
  try {
    c.mode = parse_mode(distill.require("mode"));
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("mode: ") + e.what());
  }
  c.alpha = distill.real("alpha", c.alpha, 0.0, 1.0);
  if (distill.has("kd_kind")) {
    try {
      c.kd.kind = parse_kd_kind(distill.raw("kd_kind"));
    } catch (const ConfigError& e) {
      throw ConfigError(std::string("kd_kind: ") + e.what());
    }
  }
  c.kd.temperature = distill.real("temperature", 2.0, 0.0, 1e6, true);
  c.lambda = distill.real("lambda", c.lambda, 0.0, 1e6);
  c.mu = distill.real("mu", c.mu, 0.0, 1e6);
  c.batch_size = distill.count("batch_size", c.batch_size, 1);
  c.quiz_batch_size = distill.count("quiz_batch_size", c.quiz_batch_size);
  distill.require("steps");
  c.steps = distill.count("steps", 0);
  c.eval_interval = distill.count("eval_interval", c.eval_interval);
  c.seed = distill.seed("seed", c.seed);
  c.grad_clip = distill.real("grad_clip", c.grad_clip, 0.0, 1e12);
  c.probe_size = distill.count("probe_size", c.probe_size, 1);
  if (distill.has("snapshot_steps")) {
    for (const auto& s : split_list(distill.raw("snapshot_steps"))) {
      c.snapshot_steps.push_back(static_cast<std::size_t>(Section::parse_seed(s, "snapshot_steps")));
    }
  }
  if (c.teacher_spec.input_size() != c.student_spec.input_size() ||
      c.teacher_spec.output_size() != c.student_spec.output_size()) {
    throw ConfigError("layers: teacher " + to_string(c.teacher_spec) + " and student " + to_string(c.student_spec) +
                      " disagree on input or output width");
  }

  if (tree.find("sweep") != tree.not_found()) {
    const Section sweep = section("sweep");
    SweepSection s;
    s.parameter = sweep.require("parameter");
    if (!kSweepParameters.count(s.parameter)) {
      throw ConfigError("parameter: unknown sweep parameter '" + s.parameter +
                        "' (expected alpha, temperature, student_layers or mode)");
    }
    s.values = split_list(sweep.require("values"));
    if (s.values.empty()) throw ConfigError("values: sweep needs at least one value");
    for (const auto& seed : split_list(sweep.require("seeds"))) s.seeds.push_back(Section::parse_seed(seed, "seeds"));
    if (s.seeds.empty()) throw ConfigError("seeds: sweep needs at least one seed");
    s.workers = sweep.count("workers", 1, 1);
    if (sweep.has("static_snapshot")) s.static_snapshot = sweep.raw("static_snapshot");
    if (sweep.has("cross_snapshot")) s.cross_snapshot = sweep.raw("cross_snapshot");
    out.sweep = s;

    // Type-check every value now, before any run starts.
    for (const auto& v : s.values) {
      if (s.parameter == "alpha") {
        const double a = io::parse_double(v);
        if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("values: alpha " + v + " is out of range [0, 1]");
      } else if (s.parameter == "temperature") {
        if (!(io::parse_double(v) > 0.0)) throw ConfigError("values: temperature " + v + " must be positive");
        if (c.kd.kind != KdLoss::Kind::softened_kl) {
          throw ConfigError("values: a temperature sweep needs kd_kind = softened-kl");
        }
      } else if (s.parameter == "student_layers") {
        const MlpSpec spec = parse_layers(v, "values");
        if (spec.input_size() != c.teacher_spec.input_size() || spec.output_size() != c.teacher_spec.output_size()) {
          throw ConfigError("values: student " + v + " does not fit teacher " + to_string(c.teacher_spec));
        }
      } else {
        const Mode m = parse_mode(v);
        require_snapshot_for(m, snapshot_for(out, m), m == Mode::static_kd ? "static_snapshot" : "cross_snapshot");
      }
    }
  }
  if (!out.sweep || out.sweep->parameter != "mode") require_snapshot_for(c.mode, out.snapshot, "snapshot");

  const Section output = section("output");
  if (output.has("directory")) {
    const fs::path dir = output.raw("directory");
    out.output = dir.is_absolute() || !std::getenv(kOutputRootEnv) ? dir : output_root() / dir;
  } else {
    out.output = output_root() / (source.empty() ? fs::path("run") : source.stem());
  }

  c.validate();
  return out;
}

ExperimentFile parse_config(const fs::path& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const FormatError& e) {
    throw ConfigError(e.what());
  }
  return parse_config_text(text, path);
}

std::string to_ini(const ExperimentFile& config) {
  const DataSection& d = config.data;
  const DistillConfig& c = config.distill;
  std::ostringstream os;
  const auto num = [](double v) { return io::format_double(v); };
  os << "[data]\n"
     << "generator = " << d.generator << '\n'
     << "per_class = " << d.per_class << '\n'
     << "classes = " << d.classes << '\n'
     << "radius = " << num(d.radius) << '\n'
     << "spread = " << num(d.spread) << '\n'
     << "turns = " << num(d.turns) << '\n'
     << "noise = " << num(d.noise) << '\n';
  if (!d.path.empty()) os << "path = " << d.path.string() << '\n';
  os << "dev_fraction = " << num(d.dev_fraction) << '\n'
     << "test_fraction = " << num(d.test_fraction) << '\n'
     << "quiz_fraction = " << num(c.quiz_fraction) << '\n'
     << "seed = " << d.seed << "\n\n";
  os << "[teacher]\n"
     << "layers = " << layers_value(c.teacher_spec) << '\n'
     << "pretrain_steps = " << c.teacher_pretrain_steps << '\n'
     << "pretrain_lr = " << num(c.teacher_pretrain_lr) << '\n';
  if (!config.snapshot.empty()) os << "snapshot = " << config.snapshot.string() << '\n';
  os << "\n[student]\nlayers = " << layers_value(c.student_spec) << "\n\n";
  os << "[distill]\n"
     << "mode = " << to_string(c.mode) << '\n'
     << "alpha = " << num(c.alpha) << '\n'
     << "kd_kind = " << to_string(c.kd.kind) << '\n'
     << "temperature = " << num(c.kd.temperature) << '\n'
     << "lambda = " << num(c.lambda) << '\n'
     << "mu = " << num(c.mu) << '\n'
     << "batch_size = " << c.batch_size << '\n'
     << "quiz_batch_size = " << c.quiz_batch_size << '\n'
     << "steps = " << c.steps << '\n'
     << "eval_interval = " << c.eval_interval << '\n'
     << "seed = " << c.seed << '\n'
     << "grad_clip = " << num(c.grad_clip) << '\n'
     << "probe_size = " << c.probe_size << '\n';
  if (!c.snapshot_steps.empty()) {
    os << "snapshot_steps = ";
    for (std::size_t i = 0; i < c.snapshot_steps.size(); ++i) os << (i ? "," : "") << c.snapshot_steps[i];
    os << '\n';
  }
  if (config.sweep) {
    const SweepSection& s = *config.sweep;
    os << "\n[sweep]\nparameter = " << s.parameter << "\nvalues = ";
    for (std::size_t i = 0; i < s.values.size(); ++i) os << (i ? " " : "") << s.values[i];
    os << "\nseeds = ";
    for (std::size_t i = 0; i < s.seeds.size(); ++i) os << (i ? " " : "") << s.seeds[i];
    os << "\nworkers = " << s.workers << '\n';
    if (!s.static_snapshot.empty()) os << "static_snapshot = " << s.static_snapshot.string() << '\n';
    if (!s.cross_snapshot.empty()) os << "cross_snapshot = " << s.cross_snapshot.string() << '\n';
  }
  os << "\n[output]\ndirectory = " << config.output.string() << '\n';
  return os.str();
}

Dataset make_dataset(const DataSection& d) {
  if (d.generator == "blobs") {
    return make_blobs(d.per_class, d.classes, circle_centers(d.classes, d.radius), d.spread, d.seed);
  }
  if (d.generator == "spirals") return make_spirals(d.per_class, d.turns, d.noise, d.seed);
  try {
    return read_csv(d.path);
  } catch (const FormatError& e) {
    throw ConfigError(std::string("path: ") + e.what());
  }
}

SplitSet make_splits(const ExperimentFile& config) {
  return split_dataset(make_dataset(config.data),
                       SplitFractions::from_quiz_fraction(config.distill.quiz_fraction, config.data.dev_fraction,
                                                          config.data.test_fraction),
                       config.data.seed);
}

RunManifest cmd_train(const ExperimentFile& config, std::ostream& log) {
  if (config.sweep) throw ConfigError("train does not take a [sweep] section; use the sweep command");
  RunManifest manifest;
  manifest.config = to_ini(config);
  manifest.started_at = utc_now();

  const auto snapshot = load_optional_snapshot(config.snapshot);
  const SplitSet splits = make_splits(config);
  log << "train: mode " << to_string(config.distill.mode) << ", " << config.distill.steps << " steps, seed "
      << config.distill.seed << '\n';
  const TrainingResult r = run_training(config.distill, splits, snapshot);

  Writer w(config.output);
  write_run(w, "", config, splits, r);
  manifest.files = w.files();
  manifest.finished_at = utc_now();
  write_manifest(config.output, manifest);
  log << "student test accuracy " << r.log.student_test_accuracy << ", teacher " << r.log.teacher_test_accuracy
      << "; wrote " << config.output.string() << '\n';
  return manifest;
}

RunManifest cmd_sweep(const ExperimentFile& config, std::ostream& log) {
  if (!config.sweep) throw ConfigError("sweep needs a [sweep] section");
  const SweepSection& sweep = *config.sweep;
  RunManifest manifest;
  manifest.config = to_ini(config);
  manifest.started_at = utc_now();

  const SplitSet splits = make_splits(config);

  struct Job {
    std::string value;
    std::uint64_t seed;
    ExperimentFile config;
    SweepRow row;
  };
  std::vector<Job> jobs;
  for (const auto& value : sweep.values) {
    for (auto seed : sweep.seeds) {
      std::vector<Mode> modes{Mode::metadistil, Mode::vanilla_kd};
      if (sweep.parameter == "mode") modes = {parse_mode(value)};
      for (Mode mode : modes) {
        ExperimentFile run = config;
        run.sweep.reset();
        DistillConfig& c = run.distill;
        c.mode = mode;
        c.seed = seed;
        if (sweep.parameter == "alpha") c.alpha = io::parse_double(value);
        if (sweep.parameter == "temperature") c.kd.temperature = io::parse_double(value);
        if (sweep.parameter == "student_layers") c.student_spec = parse_layers(value, "values");
        run.snapshot = (mode == Mode::static_kd || mode == Mode::cross_teach) ? snapshot_for(config, mode) : fs::path();
        run.output = config.output / "runs" / value / to_string(mode) / ("seed" + std::to_string(seed));
        jobs.push_back({value, seed, std::move(run), {sweep.parameter, value, to_string(mode), seed, 0.0}});
      }
    }
  }

  // The teacher's pretraining does not depend on any swept parameter, so
  // every run with the same seed shares one pretrained teacher.
  std::map<std::uint64_t, TeacherSnapshot> pretrained;
  std::map<std::string, TeacherSnapshot> loaded;
  for (const auto& job : jobs) {
    if (!job.config.snapshot.empty()) {
      if (!loaded.count(job.config.snapshot.string())) {
        loaded.emplace(job.config.snapshot.string(), load_snapshot(job.config.snapshot));
      }
    } else {
      pretrained.try_emplace(job.seed);
    }
  }

  std::mutex log_mutex;
  const auto pool = [&](std::size_t count, const std::function<void(std::size_t)>& work) {
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < std::min(sweep.workers, count); ++t) {
      threads.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) {
          try {
            work(i);
          } catch (...) {
            std::lock_guard lock(failure_mutex);
            if (!failure) failure = std::current_exception();
            next = count;
          }
        }
      });
    }
    for (auto& t : threads) t.join();
    if (failure) std::rethrow_exception(failure);
  };

  std::vector<std::uint64_t> seeds;
  for (const auto& [seed, snap] : pretrained) seeds.push_back(seed);
  pool(seeds.size(), [&](std::size_t i) {
    DistillConfig c = config.distill;
    c.seed = seeds[i];
    TeacherSnapshot& snap = pretrained.at(seeds[i]);
    snap.spec = c.teacher_spec;
    snap.params = pretrain_teacher(c, splits.train);
    snap.provenance = {Mode::vanilla_kd, 0, seeds[i], c.student_spec};
  });

  Writer w(config.output);
  pool(jobs.size(), [&](std::size_t i) {
    Job& job = jobs[i];
    RunManifest run_manifest;
    run_manifest.config = to_ini(job.config);
    run_manifest.started_at = utc_now();
    const TeacherSnapshot& teacher =
        job.config.snapshot.empty() ? pretrained.at(job.seed) : loaded.at(job.config.snapshot.string());
    const TrainingResult r = run_training(job.config.distill, splits, teacher);
    job.row.accuracy = r.log.student_test_accuracy;

    // Each run directory is self-contained, so analyze can read it directly.
    Writer rw(job.config.output);
    write_run(rw, "", job.config, splits, r);
    run_manifest.files = rw.files();
    run_manifest.finished_at = utc_now();
    write_manifest(job.config.output, run_manifest);
    const fs::path prefix = fs::relative(job.config.output, config.output);
    for (const auto& f : run_manifest.files) w.record(prefix / f);
    w.record(prefix / "manifest.json");
    std::lock_guard lock(log_mutex);
    log << "sweep " << sweep.parameter << " = " << job.value << ", " << job.row.mode << ", seed " << job.seed
        << ": student test accuracy " << job.row.accuracy << '\n';
  });

  std::vector<SweepRow> rows;
  for (const auto& job : jobs) rows.push_back(job.row);
  const SweepTable table = aggregate_sweep(rows, sweep.values);
  w.write("sweep.csv", sweep_to_csv(table));

  ordered_json summary;
  summary["parameter"] = sweep.parameter;
  summary["values"] = sweep.values;
  summary["seeds"] = sweep.seeds;
  ordered_json spread = ordered_json::object();
  for (const auto& [mode, s] : sweep_spread(table)) spread[mode] = s;
  summary["spread"] = spread;
  ordered_json curves = ordered_json::array();
  for (const auto& value : sweep.values) {
    ordered_json point;
    point["value"] = value;
    for (const auto& a : table.aggregates) {
      if (a.value == value) point[a.mode] = {{"mean", a.mean}, {"std", a.stddev}, {"count", a.count}};
    }
    curves.push_back(point);
  }
  summary["curves"] = curves;
  w.write("sweep_summary.json", summary.dump(2) + "\n");
  w.write("config.ini", to_ini(config));

  manifest.files = w.files();
  manifest.finished_at = utc_now();
  write_manifest(config.output, manifest);
  for (const auto& [mode, s] : sweep_spread(table)) {
    log << "spread of mean accuracy across " << sweep.parameter << " for " << mode << ": " << s << '\n';
  }
  return manifest;
}

VerifyReport cmd_verify_grad(const VerifyOptions& options, std::ostream& log) {
  if (options.instances == 0) throw ConfigError("instances must be positive");
  if (!(options.step > 0.0)) throw ConfigError("step must be positive");
  Rng rng(options.seed);
  VerifyReport report;
  report.instances = options.instances;
  const KdLoss kinds[] = {KdLoss::mse(), KdLoss::kl(2.0)};
  const Scalar alphas[] = {0.0, 0.5, 1.0};
  for (std::size_t i = 0; i < options.instances; ++i) {
    const KdLoss kd = kinds[i % 2];
    const Scalar alpha = alphas[(i / 2) % 3];
    const Instance m = random_instance(rng, kd, alpha, options.zero_lambda);

    std::vector<Scalar> analytic, numeric;
    for (const auto& g : meta_gradient(m.config, m.batch, m.labels, m.quiz, m.quiz_labels, m.student, m.teacher)) {
      analytic.insert(analytic.end(), g.data().begin(), g.data().end());
    }
    for (std::size_t j = 0; j < m.teacher.size(); ++j) {
      auto f = [&](const Tensor& tj) {
        auto values = m.teacher.tensors();
        values[j] = tj;
        return experimental_quiz_loss(m.config, m.batch, m.labels, m.quiz, m.quiz_labels, m.student,
                                      m.teacher.with_values(values));
      };
      const Tensor g = finite_diff_grad(f, m.teacher[j], options.step);
      numeric.insert(numeric.end(), g.data().begin(), g.data().end());
    }
    double error = 0.0;
    if (options.zero_lambda) {
      for (std::size_t k = 0; k < analytic.size(); ++k) error = std::max(error, std::abs(analytic[k] - numeric[k]));
    } else {
      error = relative_error(Tensor::vector(analytic), Tensor::vector(numeric));
    }
    report.worst_error = std::max(report.worst_error, error);
    log << "instance " << i + 1 << ": teacher " << to_string(m.config.teacher_spec) << ", student "
        << to_string(m.config.student_spec) << ", " << to_string(kd.kind) << ", alpha " << alpha << ", "
        << (options.zero_lambda ? "absolute" : "relative") << " error " << error << '\n';
  }
  const double limit = options.zero_lambda ? std::min(options.tolerance, 1e-12) : options.tolerance;
  report.passed = options.tolerance > 0.0 && report.worst_error <= limit;
  log << (report.passed ? "PASS" : "FAIL") << ": worst " << (options.zero_lambda ? "absolute" : "relative")
      << " error " << report.worst_error << " over " << report.instances << " instances (tolerance " << limit
      << ")\n";
  return report;
}

namespace {

struct LoadedRun {
  fs::path dir;
  ExperimentFile config;
  RunLog log;
  ParamSet initial_teacher, teacher, student;
  SplitSet splits;
};

LoadedRun load_run(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) throw ConfigError("no manifest.json in " + dir.string());
  LoadedRun r;
  r.dir = dir;
  r.config = parse_config(dir / "config.ini");
  if (r.config.sweep) throw ConfigError(dir.string() + " is a sweep directory; analyze its runs/ entries");
  r.log.mode = r.config.distill.mode;
  r.log.seed = r.config.distill.seed;
  r.log.steps = steps_from_csv(io::read_file(dir / "steps.csv"));
  r.log.evals = evals_from_csv(io::read_file(dir / "dynamics.csv"));
  r.initial_teacher = load_snapshot(dir / "teacher_initial.bin").params;
  r.teacher = load_snapshot(dir / "teacher.bin").params;
  MlpSpec student_spec;
  r.student = decode_snapshot(io::read_file(dir / "student.bin"), &student_spec);
  if (student_spec != r.config.distill.student_spec) throw FormatError("student.bin does not match config.ini");
  r.splits = make_splits(r.config);
  return r;
}

}  // namespace

std::string cmd_analyze(const std::vector<fs::path>& dirs, const fs::path& out_dir, std::ostream& log) {
  if (dirs.empty()) throw ConfigError("analyze needs at least one run directory");
  std::vector<LoadedRun> runs;
  for (const auto& d : dirs) runs.push_back(load_run(d));

  ordered_json report;
  ordered_json per_run = ordered_json::array();
  for (const auto& r : runs) {
    const DistillConfig& c = r.config.distill;
    const Tensor s_test = forward(c.student_spec, r.student, r.splits.test.features);
    ordered_json j;
    j["run"] = r.dir.string();
    j["mode"] = to_string(c.mode);
    j["seed"] = c.seed;
    j["data_seed"] = r.config.data.seed;
    j["steps"] = r.log.steps.size();
    j["pilot_effectiveness"] =
        c.mode == Mode::metadistil && !r.log.steps.empty() ? ordered_json(pilot_effectiveness(r.log)) : ordered_json();
    if (r.log.steps.size() >= 2) {
      const auto [first, second] = similarity_decrease_by_half(r.log);
      j["similarity_decrease_first_half"] = first;
      j["similarity_decrease_second_half"] = second;
    } else {
      j["similarity_decrease_first_half"] = nullptr;
      j["similarity_decrease_second_half"] = nullptr;
    }
    j["student_test_accuracy"] = accuracy(s_test, r.splits.test.labels);
    j["teacher_test_accuracy"] =
        accuracy(forward(c.teacher_spec, r.teacher, r.splits.test.features), r.splits.test.labels);
    j["loyalty_final_teacher"] = loyalty(s_test, forward(c.teacher_spec, r.teacher, r.splits.test.features));
    j["loyalty_initial_teacher"] =
        loyalty(s_test, forward(c.teacher_spec, r.initial_teacher, r.splits.test.features));
    j["teacher_dev_loss_initial"] =
        cross_entropy(forward(c.teacher_spec, r.initial_teacher, r.splits.dev.features), r.splits.dev.labels);
    j["teacher_dev_loss_final"] =
        cross_entropy(forward(c.teacher_spec, r.teacher, r.splits.dev.features), r.splits.dev.labels);
    j["dynamics_csv"] = (r.dir / "dynamics.csv").string();
    per_run.push_back(j);
  }
  report["runs"] = per_run;

  // Pair each metadistil run with the vanilla-kd runs of the same seed.
  ordered_json pairs = ordered_json::array();
  for (const auto& m : runs) {
    if (m.config.distill.mode != Mode::metadistil) continue;
    for (const auto& v : runs) {
      if (v.config.distill.mode != Mode::vanilla_kd || v.config.distill.seed != m.config.distill.seed) continue;
      if (!(v.config.data == m.config.data) || v.config.distill.quiz_fraction != m.config.distill.quiz_fraction) {
        throw ConfigError("runs " + m.dir.string() + " and " + v.dir.string() +
                          " use different data (seed or generator settings); cannot pair them");
      }
      const DistillConfig& mc = m.config.distill;
      const DistillConfig& vc = v.config.distill;
      const Dataset& quiz = m.splits.quiz;
      const IndexList hard = hard_example_indices(forward(mc.student_spec, m.student, quiz.features),
                                                  forward(vc.student_spec, v.student, quiz.features), quiz.labels);
      ordered_json p;
      p["metadistil"] = m.dir.string();
      p["vanilla_kd"] = v.dir.string();
      p["hard_examples"] = hard.size();
      if (!hard.empty()) {
        const HardExampleDelta d = hard_example_delta(mc.teacher_spec, m.initial_teacher, m.teacher, quiz.subset(hard));
        p["teacher_loss_before"] = d.loss_before;
        p["teacher_loss_after"] = d.loss_after;
      } else {
        p["teacher_loss_before"] = nullptr;
        p["teacher_loss_after"] = nullptr;
      }
      if (mc.student_spec.output_size() == vc.student_spec.output_size()) {
        p["student_agreement"] = loyalty(forward(mc.student_spec, m.student, m.splits.test.features),
                                         forward(vc.student_spec, v.student, v.splits.test.features));
      }
      pairs.push_back(p);
    }
  }
  report["pairs"] = pairs;

  const std::string text = report.dump(2) + "\n";
  const fs::path target = (out_dir.empty() ? runs.front().dir : out_dir) / "analysis.json";
  io::write_atomic(target, text);
  log << "wrote " << target.string() << '\n';
  return text;
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Knowledge distillation with a meta-learned teacher"};
  app.require_subcommand(1);

  std::string train_config;
  auto* train = app.add_subcommand("train", "Run one distillation from an INI experiment file");
  train->add_option("config", train_config, "Experiment file")->required();

  std::string sweep_config;
  auto* sweep = app.add_subcommand("sweep", "Run a paired parameter sweep");
  sweep->add_option("config", sweep_config, "Experiment file with a [sweep] section")->required();

  VerifyOptions verify;
  auto* vg = app.add_subcommand("verify-grad", "Check the teacher meta-gradient against finite differences");
  vg->add_option("--instances", verify.instances, "Random instances")->capture_default_str();
  vg->add_option("--tol", verify.tolerance, "Tolerance on the worst error")->capture_default_str();
  vg->add_option("--step", verify.step, "Finite-difference step")->capture_default_str();
  vg->add_option("--seed", verify.seed, "Instance seed")->capture_default_str();
  vg->add_flag("--zero-lambda", verify.zero_lambda, "Use lambda = 0; the gradient must vanish");

  std::vector<std::string> analyze_dirs;
  std::string analyze_out;
  auto* analyze = app.add_subcommand("analyze", "Recompute analysis metrics from run directories");
  analyze->add_option("runs", analyze_dirs, "Run directories")->required();
  analyze->add_option("--out", analyze_out, "Directory for analysis.json (default: the first run)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*train) {
      cmd_train(parse_config(train_config), out);
    } else if (*sweep) {
      cmd_sweep(parse_config(sweep_config), out);
    } else if (*vg) {
      return cmd_verify_grad(verify, out).passed ? 0 : 1;
    } else if (*analyze) {
      std::vector<fs::path> dirs(analyze_dirs.begin(), analyze_dirs.end());
      out << cmd_analyze(dirs, analyze_out, out);
    }
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace metadistil::cli
