#include "metadistil/analysis.hpp"

#include "metadistil/error.hpp"
#include "metadistil/io.hpp"

#include <json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>
#include <tuple>

namespace metadistil {

namespace {

constexpr std::pair<Mode, std::string_view> kModeNames[] = {
    {Mode::metadistil, "metadistil"}, {Mode::no_pilot, "no-pilot"},       {Mode::vanilla_kd, "vanilla-kd"},
    {Mode::static_kd, "static-kd"},   {Mode::cross_teach, "cross-teach"},
};

std::vector<std::vector<std::string>> csv_body(const std::string& text, const std::string& header, const char* what) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || io::trim(line) != header) {
    throw FormatError(std::string(what) + " CSV must start with header '" + header + "'");
  }
  const std::size_t width = io::split(header, ',').size();
  std::vector<std::vector<std::string>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (io::trim(line).empty()) continue;
    auto cells = io::split(io::trim(line), ',');
    if (cells.size() != width) {
      throw FormatError(std::string(what) + " CSV line " + std::to_string(line_no) + " has " +
                        std::to_string(cells.size()) + " cells, expected " + std::to_string(width));
    }
    rows.push_back(std::move(cells));
  }
  return rows;
}

std::size_t parse_size(const std::string& cell) {
  const auto v = io::parse_int(cell);
  if (v < 0) throw FormatError("negative count '" + cell + "'");
  return static_cast<std::size_t>(v);
}

std::uint64_t parse_seed(const std::string& cell) {
  std::uint64_t v = 0;
  const std::string t = io::trim(cell);
  auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc{} || end != t.data() + t.size()) throw FormatError("not a seed: '" + t + "'");
  return v;
}

}  // namespace

std::string to_string(Mode mode) {
  for (const auto& [m, name] : kModeNames) {
    if (m == mode) return std::string(name);
  }
  return "unknown";
}

Mode parse_mode(const std::string& name) {
  for (const auto& [m, n] : kModeNames) {
    if (n == name) return m;
  }
  throw ConfigError("unknown mode '" + name + "'");
}

bool updates_teacher(Mode mode) { return mode == Mode::metadistil || mode == Mode::no_pilot; }

std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw ShapeError("argmax needs [n x C] logits, got " + to_string(logits.shape()));
  const Matrix& m = logits.matrix();
  std::vector<std::size_t> out(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < m.cols(); ++k) {
      if (m(i, k) > m(i, best)) best = k;
    }
    out[static_cast<std::size_t>(i)] = static_cast<std::size_t>(best);
  }
  return out;
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  const auto pred = argmax_rows(logits);
  if (pred.size() != labels.size()) {
    throw ShapeError("accuracy: " + std::to_string(pred.size()) + " rows vs " + std::to_string(labels.size()) + " labels");
  }
  if (pred.empty()) throw ShapeError("accuracy of an empty batch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += labels[i] >= 0 && pred[i] == static_cast<std::size_t>(labels[i]);
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double loyalty(const Tensor& student_logits, const Tensor& teacher_logits) {
  if (student_logits.shape() != teacher_logits.shape()) {
    throw ShapeError("loyalty: " + to_string(student_logits.shape()) + " vs " + to_string(teacher_logits.shape()));
  }
  const auto s = argmax_rows(student_logits);
  const auto t = argmax_rows(teacher_logits);
  if (s.empty()) throw ShapeError("loyalty of an empty batch");
  std::size_t same = 0;
  for (std::size_t i = 0; i < s.size(); ++i) same += s[i] == t[i];
  return static_cast<double>(same) / static_cast<double>(s.size());
}

double pilot_effectiveness(const RunLog& log) {
  if (log.mode != Mode::metadistil) {
    throw ConfigError("pilot effectiveness needs a metadistil run, got " + to_string(log.mode));
  }
  if (log.steps.empty()) throw ConfigError("pilot effectiveness of a run without step records");
  std::size_t better = 0;
  for (const auto& r : log.steps) better += r.real_quiz_loss < r.experimental_quiz_loss;
  return static_cast<double>(better) / static_cast<double>(log.steps.size());
}

double output_divergence(const Tensor& teacher_logits, const Tensor& student_logits) {
  if (teacher_logits.shape() != student_logits.shape()) {
    throw ShapeError("divergence: " + to_string(teacher_logits.shape()) + " vs " + to_string(student_logits.shape()));
  }
  // T^2 * mean KL at T = 1 is the plain mean KL.
  return std::max(0.0, kd_loss(KdLoss::kl(1.0), student_logits, teacher_logits));
}

SimilarityShift similarity_shift(const MlpSpec& teacher_spec, const ParamSet& teacher_before,
                                 const ParamSet& teacher_after, const MlpSpec& student_spec,
                                 const ParamSet& student, const Tensor& probe) {
  const Tensor s = forward(student_spec, student, probe);
  SimilarityShift out;
  out.before = output_divergence(forward(teacher_spec, teacher_before, probe), s);
  out.after = teacher_after == teacher_before ? out.before
                                              : output_divergence(forward(teacher_spec, teacher_after, probe), s);
  out.decreased = out.after < out.before;
  return out;
}

std::pair<double, double> similarity_decrease_by_half(const RunLog& log) {
  const std::size_t n = log.steps.size();
  if (n < 2) throw ConfigError("similarity halves need at least two step records");
  const std::size_t half = n / 2;
  auto share = [&](std::size_t begin, std::size_t end) {
    std::size_t dec = 0;
    for (std::size_t i = begin; i < end; ++i) dec += log.steps[i].similarity_after < log.steps[i].similarity_before;
    return static_cast<double>(dec) / static_cast<double>(end - begin);
  };
  return {share(0, half), share(half, n)};
}

HardExampleDelta hard_example_delta(const MlpSpec& teacher_spec, const ParamSet& teacher_before,
                                    const ParamSet& teacher_after, const Dataset& subset) {
  if (subset.size() == 0) throw ConfigError("hard-example subset is empty");
  HardExampleDelta out;
  out.count = subset.size();
  out.loss_before = cross_entropy(forward(teacher_spec, teacher_before, subset.features), subset.labels);
  out.loss_after = cross_entropy(forward(teacher_spec, teacher_after, subset.features), subset.labels);
  return out;
}

IndexList hard_example_indices(const Tensor& better_logits, const Tensor& worse_logits, std::span<const int> labels) {
  if (better_logits.shape() != worse_logits.shape()) throw ShapeError("hard examples: logit shapes differ");
  const auto b = argmax_rows(better_logits);
  const auto w = argmax_rows(worse_logits);
  if (b.size() != labels.size()) throw ShapeError("hard examples: label count differs from rows");
  IndexList out;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    if (b[i] == y && w[i] != y) out.push_back(i);
  }
  return out;
}

SweepTable aggregate_sweep(std::vector<SweepRow> rows, const std::vector<std::string>& value_order) {
  if (rows.empty()) throw ConfigError("sweep has no rows");
  const auto rank = [&](const std::string& v) {
    const auto it = std::find(value_order.begin(), value_order.end(), v);
    return static_cast<std::size_t>(it - value_order.begin());
  };
  // A total order on rows makes every sum below independent of input order.
  std::sort(rows.begin(), rows.end(), [&](const SweepRow& a, const SweepRow& b) {
    const auto ka = std::tuple(rank(a.value), a.value, a.mode, a.seed, a.accuracy, a.parameter);
    const auto kb = std::tuple(rank(b.value), b.value, b.mode, b.seed, b.accuracy, b.parameter);
    return ka < kb;
  });

  SweepTable table;
  for (std::size_t begin = 0; begin < rows.size();) {
    std::size_t end = begin;
    while (end < rows.size() && rows[end].value == rows[begin].value && rows[end].mode == rows[begin].mode) ++end;
    SweepAggregate agg{rows[begin].parameter, rows[begin].value, rows[begin].mode, 0.0, 0.0, end - begin};
    for (std::size_t i = begin; i < end; ++i) agg.mean += rows[i].accuracy;
    agg.mean /= static_cast<double>(agg.count);
    if (agg.count > 1) {
      double ss = 0.0;
      for (std::size_t i = begin; i < end; ++i) ss += (rows[i].accuracy - agg.mean) * (rows[i].accuracy - agg.mean);
      agg.stddev = std::sqrt(ss / static_cast<double>(agg.count - 1));
    }
    table.aggregates.push_back(std::move(agg));
    begin = end;
  }
  table.rows = std::move(rows);
  return table;
}

std::vector<std::pair<std::string, double>> sweep_spread(const SweepTable& table) {
  std::map<std::string, std::pair<double, double>> range;
  for (const auto& a : table.aggregates) {
    auto [it, fresh] = range.try_emplace(a.mode, a.mean, a.mean);
    if (!fresh) {
      it->second.first = std::min(it->second.first, a.mean);
      it->second.second = std::max(it->second.second, a.mean);
    }
  }
  std::vector<std::pair<std::string, double>> out;
  for (const auto& [mode, r] : range) out.emplace_back(mode, r.second - r.first);
  return out;
}

namespace {
const std::string kStepHeader =
    "step,train_loss,experimental_quiz_loss,real_quiz_loss,teacher_grad_norm,similarity_before,similarity_after";
const std::string kEvalHeader = "step,student_dev_accuracy,teacher_dev_accuracy";
const std::string kSweepHeader = "kind,parameter,value,mode,seed,accuracy,mean,std,count";
}  // namespace

std::string steps_to_csv(const std::vector<StepRecord>& steps) {
  std::string out = kStepHeader + "\n";
  for (const auto& r : steps) {
    out += std::to_string(r.step);
    for (double v : {r.train_loss, r.experimental_quiz_loss, r.real_quiz_loss, r.teacher_grad_norm,
                     r.similarity_before, r.similarity_after}) {
      out += ',' + io::format_double(v);
    }
    out += '\n';
  }
  return out;
}

std::vector<StepRecord> steps_from_csv(const std::string& text) {
  std::vector<StepRecord> out;
  for (const auto& c : csv_body(text, kStepHeader, "step")) {
    StepRecord r;
    r.step = parse_size(c[0]);
    r.train_loss = io::parse_double(c[1]);
    r.experimental_quiz_loss = io::parse_double(c[2]);
    r.real_quiz_loss = io::parse_double(c[3]);
    r.teacher_grad_norm = io::parse_double(c[4]);
    r.similarity_before = io::parse_double(c[5]);
    r.similarity_after = io::parse_double(c[6]);
    if (!out.empty() && r.step <= out.back().step) throw FormatError("step records must increase");
    out.push_back(r);
  }
  return out;
}

std::string evals_to_csv(const std::vector<EvalRecord>& evals) {
  std::string out = kEvalHeader + "\n";
  for (const auto& e : evals) {
    out += std::to_string(e.step) + ',' + io::format_double(e.student_dev_accuracy) + ',' +
           io::format_double(e.teacher_dev_accuracy) + '\n';
  }
  return out;
}

std::vector<EvalRecord> evals_from_csv(const std::string& text) {
  std::vector<EvalRecord> out;
  for (const auto& c : csv_body(text, kEvalHeader, "dynamics")) {
    out.push_back({parse_size(c[0]), io::parse_double(c[1]), io::parse_double(c[2])});
  }
  return out;
}

std::string sweep_to_csv(const SweepTable& table) {
  std::string out = kSweepHeader + "\n";
  for (const auto& r : table.rows) {
    out += "row," + r.parameter + ',' + r.value + ',' + r.mode + ',' + std::to_string(r.seed) + ',' +
           io::format_double(r.accuracy) + ",,,\n";
  }
  for (const auto& a : table.aggregates) {
    out += "aggregate," + a.parameter + ',' + a.value + ',' + a.mode + ",,," + io::format_double(a.mean) + ',' +
           io::format_double(a.stddev) + ',' + std::to_string(a.count) + '\n';
  }
  return out;
}

SweepTable sweep_from_csv(const std::string& text) {
  SweepTable table;
  for (const auto& c : csv_body(text, kSweepHeader, "sweep")) {
    if (c[0] == "row") {
      if (!c[6].empty() || !c[7].empty() || !c[8].empty()) throw FormatError("sweep row carries aggregate cells");
      table.rows.push_back({c[1], c[2], c[3], parse_seed(c[4]), io::parse_double(c[5])});
    } else if (c[0] == "aggregate") {
      if (!c[4].empty() || !c[5].empty()) throw FormatError("sweep aggregate carries row cells");
      table.aggregates.push_back({c[1], c[2], c[3], io::parse_double(c[6]), io::parse_double(c[7]), parse_size(c[8])});
    } else {
      throw FormatError("sweep CSV kind must be 'row' or 'aggregate', got '" + c[0] + "'");
    }
  }
  return table;
}

std::string summary_json(const RunLog& log) {
  nlohmann::ordered_json j;
  j["mode"] = to_string(log.mode);
  j["seed"] = log.seed;
  j["steps"] = log.steps.size();
  j["student_test_accuracy"] = log.student_test_accuracy;
  j["teacher_test_accuracy"] = log.teacher_test_accuracy;
  if (log.mode == Mode::metadistil && !log.steps.empty()) {
    j["pilot_effectiveness"] = pilot_effectiveness(log);
  } else {
    j["pilot_effectiveness"] = nullptr;
  }
  if (log.steps.size() >= 2) {
    const auto [first, second] = similarity_decrease_by_half(log);
    j["similarity_decrease_first_half"] = first;
    j["similarity_decrease_second_half"] = second;
  } else {
    j["similarity_decrease_first_half"] = nullptr;
    j["similarity_decrease_second_half"] = nullptr;
  }
  if (!log.evals.empty()) {
    j["final_student_dev_accuracy"] = log.evals.back().student_dev_accuracy;
    j["final_teacher_dev_accuracy"] = log.evals.back().teacher_dev_accuracy;
  }
  j["quiz_violations"] = log.quiz_violations;
  j["elapsed_seconds"] = log.elapsed_seconds;
  return j.dump(2) + "\n";
}

}  // namespace metadistil
