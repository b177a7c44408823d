#include "metadistil/distill.hpp"

#include "metadistil/error.hpp"
#include "metadistil/io.hpp"
#include "metadistil/rng.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <charconv>
#include <cstring>
#include <numeric>
#include <set>
#include <sstream>

namespace metadistil {

namespace {

// Independent random streams of one run.
enum Stream : std::uint64_t {
  kTeacherInit = 1,
  kStudentInit = 2,
  kTrainBatches = 3,
  kQuizBatches = 4,
  kProbe = 5,
  kPretrainBatches = 6,
};

constexpr char kSnapshotMagic[4] = {'M', 'D', 'T', 'S'};
constexpr std::uint32_t kSnapshotVersion = 1;

template <class T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(T) > bytes.size()) throw FormatError("teacher snapshot is truncated");
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
  }
  pos += sizeof(T);
  return value;
}

Scalar global_norm(std::span<const Tensor> tensors) {
  Scalar ss = 0.0;
  for (const auto& t : tensors) ss += t.matrix().squaredNorm();
  return std::sqrt(ss);
}

// Source rows of a split's batch.
IndexList source_rows(const IndexList& split_rows, std::span<const std::size_t> batch) {
  IndexList out;
  out.reserve(batch.size());
  for (auto i : batch) out.push_back(split_rows.at(i));
  return out;
}

}  // namespace

void DistillConfig::validate() const {
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  kd.validate();
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be a finite non-negative rate");
  if (!(mu >= 0.0) || !std::isfinite(mu)) throw ConfigError("mu must be a finite non-negative rate");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(quiz_fraction > 0.0 && quiz_fraction < 1.0)) throw ConfigError("quiz_fraction must lie in (0, 1)");
  if (!(teacher_pretrain_lr > 0.0)) throw ConfigError("teacher_pretrain_lr must be positive");
  if (!(grad_clip >= 0.0)) throw ConfigError("grad_clip must be non-negative");
  if (probe_size == 0) throw ConfigError("probe_size must be positive");
  teacher_spec.validate();
  student_spec.validate();
  if (teacher_spec.input_size() != student_spec.input_size() ||
      teacher_spec.output_size() != student_spec.output_size()) {
    throw ConfigError("teacher " + to_string(teacher_spec) + " and student " + to_string(student_spec) +
                      " disagree on input or class count");
  }
}

std::string encode_snapshot(const MlpSpec& spec, const ParamSet& params) {
  if (!params.matches(spec)) throw ShapeError("snapshot parameters do not match " + to_string(spec));
  std::string out(kSnapshotMagic, sizeof kSnapshotMagic);
  put_le<std::uint32_t>(out, kSnapshotVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(spec.layers.size()));
  for (auto w : spec.layers) put_le<std::uint64_t>(out, w);
  for (const auto& [name, t] : params.entries) {
    for (Scalar v : t.data()) put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

ParamSet decode_snapshot(std::string_view bytes, MlpSpec* spec_out) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kSnapshotMagic, 4) != 0) {
    throw FormatError("not a teacher snapshot (bad magic)");
  }
  std::size_t pos = 4;
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kSnapshotVersion) throw FormatError("unsupported snapshot version " + std::to_string(version));
  const auto count = get_le<std::uint32_t>(bytes, pos);
  if (count < 2 || count > 1024) throw FormatError("implausible snapshot layer count " + std::to_string(count));
  MlpSpec spec;
  for (std::uint32_t i = 0; i < count; ++i) spec.layers.push_back(get_le<std::uint64_t>(bytes, pos));
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("snapshot header: ") + e.what());
  }
  if ((bytes.size() - pos) != 8 * spec.parameter_count()) {
    throw FormatError("snapshot holds " + std::to_string(bytes.size() - pos) + " payload bytes, expected " +
                      std::to_string(8 * spec.parameter_count()) + " for " + to_string(spec));
  }

  const ParamSet like = init_params(spec, 0);
  std::vector<Tensor> values;
  for (const auto& [name, t] : like.entries) {
    std::vector<Scalar> data(t.size());
    for (auto& v : data) v = std::bit_cast<Scalar>(get_le<std::uint64_t>(bytes, pos));
    values.emplace_back(t.shape(), data);
  }
  if (spec_out) *spec_out = spec;
  return like.with_values(std::move(values));
}

void save_snapshot(const TeacherSnapshot& snapshot, const std::filesystem::path& path) {
  io::write_atomic(path, encode_snapshot(snapshot.spec, snapshot.params));
  std::ostringstream meta;
  meta << "mode=" << to_string(snapshot.provenance.mode) << '\n'
       << "step=" << snapshot.provenance.step << '\n'
       << "seed=" << snapshot.provenance.seed << '\n'
       << "student_layers=" << to_string(snapshot.provenance.student_spec) << '\n';
  auto meta_path = path;
  meta_path += ".meta";
  io::write_atomic(meta_path, meta.str());
}

TeacherSnapshot load_snapshot(const std::filesystem::path& path) {
  TeacherSnapshot out;
  out.params = decode_snapshot(io::read_file(path), &out.spec);

  auto meta_path = path;
  meta_path += ".meta";
  std::istringstream meta(io::read_file(meta_path));
  std::string line;
  bool seen[4] = {};
  while (std::getline(meta, line)) {
    if (io::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw FormatError("snapshot sidecar line without '=': " + line);
    const std::string key = io::trim(line.substr(0, eq));
    const std::string value = io::trim(line.substr(eq + 1));
    if (key == "mode") {
      try {
        out.provenance.mode = parse_mode(value);
      } catch (const ConfigError& e) {
        throw FormatError(e.what());
      }
      seen[0] = true;
    } else if (key == "step") {
      out.provenance.step = static_cast<std::size_t>(io::parse_int(value));
      seen[1] = true;
    } else if (key == "seed") {
      std::uint64_t s = 0;
      auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), s);
      if (ec != std::errc{} || end != value.data() + value.size()) throw FormatError("bad snapshot seed " + value);
      out.provenance.seed = s;
      seen[2] = true;
    } else if (key == "student_layers") {
      for (const auto& w : io::split(value, ',')) {
        out.provenance.student_spec.layers.push_back(static_cast<std::size_t>(io::parse_int(w)));
      }
      seen[3] = true;
    } else {
      throw FormatError("unknown snapshot sidecar key '" + key + "'");
    }
  }
  for (bool s : seen) {
    if (!s) throw FormatError("snapshot sidecar " + meta_path.string() + " is incomplete");
  }
  return out;
}

std::vector<Var> unrolled_sgd_step(Var loss, std::span<const Var> params, Scalar lr) {
  return sgd_step(params, backward(loss, params), lr);
}

InnerUpdate inner_update(const DistillConfig& config, const Tensor& batch, std::span<const int> labels,
                         const ParamSet& student, const ParamSet& teacher, bool differentiable) {
  if (batch.rank() != 2 || static_cast<std::size_t>(batch.rows()) != labels.size()) {
    throw ShapeError("batch " + to_string(batch.shape()) + " does not align with " + std::to_string(labels.size()) +
                     " labels");
  }
  InnerUpdate out;
  out.graph = std::make_shared<Graph>();
  out.differentiable = differentiable;
  Graph& g = *out.graph;
  const auto theta_s = as_parameters(g, student);
  out.teacher = differentiable ? as_parameters(g, teacher) : as_constants(g, teacher);
  const Var x = g.constant(batch);
  const Var s_logits = forward(config.student_spec, theta_s, x);
  const Var t_logits = forward(config.teacher_spec, out.teacher, x);
  const Var loss = student_loss(config.objective(), s_logits, t_logits, labels);
  out.loss = loss.value().item();
  out.updated = unrolled_sgd_step(loss, theta_s, config.lambda);
  out.params = values_of(out.updated, student);
  return out;
}

MetaUpdate meta_update(const DistillConfig& config, const Tensor& quiz_batch, std::span<const int> quiz_labels,
                       const InnerUpdate& experiment, const ParamSet& teacher) {
  if (!experiment.differentiable || !experiment.graph) {
    throw ConfigError("meta_update needs an experimental student from a differentiable inner_update");
  }
  Graph& g = *experiment.graph;
  bool linked = false;
  for (Var p : experiment.updated) linked = linked || g.depends_on(p, experiment.teacher);
  if (!linked) throw ConfigError("experimental student does not depend on the teacher");

  const Var q = g.constant(quiz_batch);
  const Var quiz_loss = cross_entropy(forward(config.student_spec, experiment.updated, q), quiz_labels);
  const GradientMap grads = backward(quiz_loss, experiment.teacher);

  MetaUpdate out;
  out.quiz_loss = quiz_loss.value().item();
  for (Var p : experiment.teacher) out.gradient.push_back(grads.at(p).value());
  out.grad_norm = global_norm(out.gradient);
  if (!std::isfinite(out.grad_norm)) throw NumericError("meta-gradient is not finite");

  if (config.mu == 0.0) {
    out.teacher = teacher;
    return out;
  }
  std::vector<Tensor> step = out.gradient;
  if (config.grad_clip > 0.0 && out.grad_norm > config.grad_clip) {
    const Scalar c = config.grad_clip / out.grad_norm;
    for (auto& t : step) t = Tensor(t.shape(), Matrix(t.matrix() * c));
  }
  out.teacher = sgd_step(teacher, step, config.mu);
  return out;
}

Scalar experimental_quiz_loss(const DistillConfig& config, const Tensor& batch, std::span<const int> labels,
                              const Tensor& quiz_batch, std::span<const int> quiz_labels, const ParamSet& student,
                              const ParamSet& teacher) {
  const InnerUpdate exp = inner_update(config, batch, labels, student, teacher, false);
  return cross_entropy(forward(config.student_spec, exp.params, quiz_batch), quiz_labels);
}

std::vector<Tensor> meta_gradient(const DistillConfig& config, const Tensor& batch, std::span<const int> labels,
                                  const Tensor& quiz_batch, std::span<const int> quiz_labels,
                                  const ParamSet& student, const ParamSet& teacher) {
  const InnerUpdate exp = inner_update(config, batch, labels, student, teacher, true);
  return meta_update(config, quiz_batch, quiz_labels, exp, teacher).gradient;
}

PilotRound pilot_round(const DistillConfig& config, const Tensor& batch, std::span<const int> labels,
                       const Tensor& quiz_batch, std::span<const int> quiz_labels, const ParamSet& student,
                       const ParamSet& teacher) {
  const InnerUpdate experiment = inner_update(config, batch, labels, student, teacher, true);
  MetaUpdate meta = meta_update(config, quiz_batch, quiz_labels, experiment, teacher);
  const InnerUpdate real = inner_update(config, batch, labels, student, meta.teacher, false);

  PilotRound out;
  out.student = real.params;
  out.record.train_loss = real.loss;
  out.record.experimental_quiz_loss = meta.quiz_loss;
  out.record.real_quiz_loss = cross_entropy(forward(config.student_spec, real.params, quiz_batch), quiz_labels);
  out.record.teacher_grad_norm = meta.grad_norm;
  out.teacher = std::move(meta.teacher);
  return out;
}

namespace {

// Endless epoch-shuffled batches over one split.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::size_t batch_size, std::uint64_t seed)
      : n_(n), batch_size_(batch_size), seed_(seed) {}

  const IndexList& next() {
    if (pos_ == current_.size()) {
      current_ = batches(n_, batch_size_, seed_, epoch_++);
      pos_ = 0;
    }
    return current_[pos_++];
  }

 private:
  std::size_t n_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<IndexList> current_;
  std::size_t pos_ = 0;
};

void check_split(const Dataset& part, const IndexList& rows, const char* name) {
  if (part.size() == 0) throw ConfigError(std::string(name) + " split is empty");
  if (rows.size() != part.size()) {
    throw ConfigError(std::string(name) + " split has " + std::to_string(part.size()) + " rows but " +
                      std::to_string(rows.size()) + " source indices");
  }
}

}  // namespace

ParamSet pretrain_teacher(const DistillConfig& config, const Dataset& train) {
  ParamSet teacher = init_params(config.teacher_spec, derive_seed(config.seed, kTeacherInit));
  BatchStream stream(train.size(), config.batch_size, derive_seed(config.seed, kPretrainBatches));
  for (std::size_t s = 0; s < config.teacher_pretrain_steps; ++s) {
    const Dataset b = train.subset(stream.next());
    teacher = task_step(config.teacher_spec, teacher, b.features, b.labels, config.teacher_pretrain_lr);
  }
  return teacher;
}

TrainingResult run_training(const DistillConfig& config, const SplitSet& splits,
                            const std::optional<TeacherSnapshot>& snapshot, const BatchObserver& observer) {
  config.validate();
  check_split(splits.train, splits.train_indices, "train");
  check_split(splits.quiz, splits.quiz_indices, "quiz");
  check_split(splits.dev, splits.dev_indices, "dev");
  check_split(splits.test, splits.test_indices, "test");
  if (splits.train.dimension() != config.student_spec.input_size() ||
      splits.train.class_count > config.student_spec.output_size()) {
    throw ConfigError("data of dimension " + std::to_string(splits.train.dimension()) + " with " +
                      std::to_string(splits.train.class_count) + " classes does not fit " +
                      to_string(config.student_spec));
  }

  const auto start = std::chrono::steady_clock::now();
  const auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  TrainingResult out;
  if (config.mode == Mode::static_kd || config.mode == Mode::cross_teach) {
    if (!snapshot) throw ConfigError(to_string(config.mode) + " needs a teacher snapshot");
    const bool same_student = snapshot->provenance.student_spec == config.student_spec;
    if (config.mode == Mode::static_kd && !same_student) {
      throw ConfigError("static-kd needs a snapshot trained with student " + to_string(config.student_spec) +
                        ", got " + to_string(snapshot->provenance.student_spec));
    }
    if (config.mode == Mode::cross_teach && same_student) {
      throw ConfigError("cross-teach needs a snapshot trained with a different student than " +
                        to_string(config.student_spec));
    }
  }
  if (snapshot) {
    if (snapshot->spec != config.teacher_spec || !snapshot->params.matches(config.teacher_spec)) {
      throw ConfigError("snapshot teacher " + to_string(snapshot->spec) + " does not match " +
                        to_string(config.teacher_spec));
    }
    out.teacher = snapshot->params;
  } else {
    out.teacher = pretrain_teacher(config, splits.train);
  }
  out.initial_teacher = out.teacher;
  out.student = init_params(config.student_spec, derive_seed(config.seed, kStudentInit));

  RunLog& log = out.log;
  log.mode = config.mode;
  log.seed = config.seed;

  // Every source row belongs to exactly one split; tag train and quiz rows.
  std::size_t source_size = 0;
  for (const auto* rows : {&splits.train_indices, &splits.quiz_indices, &splits.dev_indices, &splits.test_indices}) {
    for (auto r : *rows) source_size = std::max(source_size, r + 1);
  }
  std::vector<unsigned char> owner(source_size, 0);
  for (auto r : splits.train_indices) owner[r] |= 1;
  for (auto r : splits.quiz_indices) owner[r] |= 2;

  // A fixed probe batch from the dev split for teacher-student divergence.
  IndexList probe_rows(splits.dev.size());
  std::iota(probe_rows.begin(), probe_rows.end(), std::size_t{0});
  Rng probe_rng(derive_seed(config.seed, kProbe));
  probe_rng.shuffle(std::span<std::size_t>(probe_rows));
  probe_rows.resize(std::min(config.probe_size, probe_rows.size()));
  const Tensor probe = splits.dev.subset(probe_rows).features;

  const auto evaluate = [&](std::size_t step) {
    log.evals.push_back({step, accuracy(forward(config.student_spec, out.student, splits.dev.features), splits.dev.labels),
                         accuracy(forward(config.teacher_spec, out.teacher, splits.dev.features), splits.dev.labels)});
  };
  evaluate(0);

  BatchStream train_stream(splits.train.size(), config.batch_size, derive_seed(config.seed, kTrainBatches));
  Rng quiz_rng(derive_seed(config.seed, kQuizBatches));
  const std::size_t quiz_size = config.quiz_batch();
  const std::set<std::size_t> snapshot_steps(config.snapshot_steps.begin(), config.snapshot_steps.end());

  for (std::size_t step = 1; step <= config.steps; ++step) {
    const IndexList& batch_idx = train_stream.next();
    IndexList quiz_idx(quiz_size);
    for (auto& i : quiz_idx) i = quiz_rng.below(splits.quiz.size());

    const IndexList train_rows = source_rows(splits.train_indices, batch_idx);
    const IndexList quiz_rows = source_rows(splits.quiz_indices, quiz_idx);
    bool clean = true;
    for (auto r : train_rows) clean = clean && owner[r] == 1;
    for (auto r : quiz_rows) clean = clean && owner[r] == 2;
    if (clean) {
      std::vector<std::size_t> a = train_rows, b = quiz_rows;
      std::sort(a.begin(), a.end());
      std::sort(b.begin(), b.end());
      IndexList shared;
      std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(shared));
      clean = shared.empty();
    }
    if (!clean) ++log.quiz_violations;
    if (observer) observer(step, train_rows, quiz_rows);

    const Dataset batch = splits.train.subset(batch_idx);
    const Dataset quiz = splits.quiz.subset(quiz_idx);
    const ParamSet teacher_before = out.teacher;
    const ParamSet student_before = out.student;

    StepRecord record;
    switch (config.mode) {
      case Mode::metadistil: {
        PilotRound round = pilot_round(config, batch.features, batch.labels, quiz.features, quiz.labels, out.student,
                                       out.teacher);
        record = round.record;
        out.student = std::move(round.student);
        out.teacher = std::move(round.teacher);
        break;
      }
      case Mode::no_pilot: {
        const InnerUpdate experiment = inner_update(config, batch.features, batch.labels, out.student, out.teacher, true);
        MetaUpdate meta = meta_update(config, quiz.features, quiz.labels, experiment, out.teacher);
        record.train_loss = experiment.loss;
        record.experimental_quiz_loss = meta.quiz_loss;
        record.real_quiz_loss = meta.quiz_loss;
        record.teacher_grad_norm = meta.grad_norm;
        out.student = experiment.params;
        out.teacher = std::move(meta.teacher);
        break;
      }
      case Mode::vanilla_kd:
      case Mode::static_kd:
      case Mode::cross_teach: {
        const InnerUpdate real = inner_update(config, batch.features, batch.labels, out.student, out.teacher, false);
        record.train_loss = real.loss;
        record.real_quiz_loss = cross_entropy(forward(config.student_spec, real.params, quiz.features), quiz.labels);
        record.experimental_quiz_loss = record.real_quiz_loss;
        out.student = real.params;
        break;
      }
    }

    const SimilarityShift shift = similarity_shift(config.teacher_spec, teacher_before, out.teacher,
                                                   config.student_spec, student_before, probe);
    record.step = step;
    record.similarity_before = shift.before;
    record.similarity_after = shift.after;
    record.elapsed_seconds = elapsed();
    log.steps.push_back(record);

    if (snapshot_steps.count(step)) log.teacher_snapshots.emplace_back(step, out.teacher);
    if (config.eval_interval > 0 && step % config.eval_interval == 0) evaluate(step);
  }
  if (log.evals.back().step != config.steps) evaluate(config.steps);

  log.student_test_accuracy = accuracy(forward(config.student_spec, out.student, splits.test.features), splits.test.labels);
  log.teacher_test_accuracy = accuracy(forward(config.teacher_spec, out.teacher, splits.test.features), splits.test.labels);
  log.elapsed_seconds = elapsed();
  return out;
}

}  // namespace metadistil
