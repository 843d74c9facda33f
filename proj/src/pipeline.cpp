#include "ennshift/pipeline.hpp"

#include <algorithm>
#include <exception>
#include <fstream>
#include <set>
#include <thread>

#include "ennshift/errors.hpp"
#include "ennshift/random.hpp"

namespace ennshift {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kTrainDataStream = 1;
constexpr std::uint64_t kValDataStream = 2;
constexpr std::uint64_t kTestDataStream = 3;
constexpr std::uint64_t kCorruptionStream = 4;
constexpr std::uint64_t kDyadicStream = 5;
constexpr std::uint64_t kIndexStream = 6;

// Reads an object field by field, reporting errors with a dotted path and
// rejecting keys nobody consumed.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + "expected an object");
  }

  template <class T>
  void get(const char* key, T& dst) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    dst = convert<T>(*it, join(key));
  }

  template <class T>
  void get_optional(const char* key, std::optional<T>& dst) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    dst = convert<T>(*it, join(key));
  }

  bool has(const char* key) const { return j_.contains(key); }

  Fields sub(const char* key) {
    seen_.insert(key);
    static const json empty = json::object();
    const auto it = j_.find(key);
    return Fields(it == j_.end() ? empty : *it, join(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(join(it.key()) + ": unknown field");
    }
  }

 private:
  template <class T>
  static T convert(const json& v, const std::string& path) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(path + ": expected a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) throw ConfigError(path + ": expected a non-negative integer");
      return v.get<T>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(path + ": expected an integer");
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(path + ": expected a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(path + ": expected a string");
      return v.get<std::string>();
    } else {
      if (!v.is_array()) throw ConfigError(path + ": expected an array");
      T out;
      for (std::size_t i = 0; i < v.size(); ++i) {
        out.push_back(convert<typename T::value_type>(v[i], path + "[" + std::to_string(i) + "]"));
      }
      return out;
    }
  }

  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? std::string("config: ") : path_ + ": "; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_train(Fields f, TrainConfig& c) {
  f.get("learning_rate", c.learning_rate);
  f.get("momentum", c.momentum);
  f.get("batch_size", c.batch_size);
  f.get("epochs", c.epochs);
  f.get("weight_decay", c.weight_decay);
  f.get("n_train_z", c.n_train_z);
  f.get("max_grad_norm", c.max_grad_norm);
  f.finish();
}

json train_json(const TrainConfig& c) {
  json j = to_json(c);
  j.erase("seed");
  return j;
}

void check(bool ok, const std::string& path, const std::string& message) {
  if (!ok) throw ConfigError(path + ": " + message);
}

template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(jobs);
  std::vector<std::thread> workers;
  for (std::size_t j = 0; j < jobs; ++j) {
    workers.emplace_back([&, j] {
      try {
        for (std::size_t i = j; i < n; i += jobs) fn(i);
      } catch (...) {
        errors[j] = std::current_exception();
      }
    });
  }
  for (std::thread& t : workers) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string dataset_file(const std::string& name) {
  std::string out = name;
  std::replace(out.begin(), out.end(), '/', '_');
  return out + ".enn";
}

void add_dataset_rows(std::vector<ReportRow>& rows, const SuiteMetrics& s,
                      const DatasetMetrics& m, std::uint64_t seed) {
  const std::string dataset = m.corruption_type.empty() ? m.dataset : "corrupted";
  auto add = [&](const char* metric, double value) {
    rows.push_back({s.model, s.model_size_params, dataset, m.corruption_type, m.severity, metric,
                    value, s.temperature, seed});
  };
  add("accuracy", m.accuracy);
  add("ece", m.ece);
  add("marginal_nll", m.marginal_nll);
  add("joint_nll", m.joint_nll);
  add("confidence", m.confidence);
  add("failure_rate", m.failure_rate);
}

}  // namespace

// --- configuration -------------------------------------------------------------

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  Fields root(j, "");
  root.get("seed", c.seed);

  Fields data = root.sub("data");
  data.get("classes", c.data.classes);
  data.get("in_dist", c.data.in_dist);
  data.get("train", c.data.train);
  data.get("val", c.data.val);
  data.get("test", c.data.test);
  data.get("class_subset", c.data.class_subset);
  data.get("corruptions", c.data.corruptions);
  data.get("severities", c.data.severities);
  Fields grating = data.sub("grating");
  grating.get("frequency", c.data.grating.frequency);
  grating.get("amplitude_min", c.data.grating.amplitude_min);
  grating.get("amplitude_max", c.data.grating.amplitude_max);
  grating.get("noise_sigma", c.data.grating.noise_sigma);
  grating.finish();
  data.finish();

  Fields models = root.sub("models");
  models.get("ladder", c.models.ladder);
  models.get("base_channels", c.models.base_channels);
  models.get("strides", c.models.strides);
  models.get("kernel", c.models.kernel);
  models.get("ensemble_sizes", c.models.ensemble_sizes);
  models.get("ensemble_pool", c.models.ensemble_pool);
  models.get("ensemble_rung", c.models.ensemble_rung);
  models.get("member_order", c.models.member_order);
  models.get("baseline_rung", c.models.baseline_rung);
  Fields epinet = models.sub("epinet");
  epinet.get("index_dim", c.models.epinet.index_dim);
  epinet.get("hidden", c.models.epinet.hidden);
  epinet.get("alpha_mlp", c.models.epinet.alpha_mlp);
  epinet.get("alpha_conv", c.models.epinet.alpha_conv);
  epinet.get("prior_conv_channels", c.models.epinet.prior_conv_channels);
  epinet.get("prior_conv_kernel", c.models.epinet.prior_conv_kernel);
  epinet.get("prior_conv_stride", c.models.epinet.prior_conv_stride);
  epinet.finish();
  models.finish();

  read_train(root.sub("base_train"), c.base_train);
  read_train(root.sub("epinet_train"), c.epinet_train);

  Fields eval = root.sub("eval");
  eval.get("n_index", c.eval.n_index);
  eval.get("tau", c.eval.tau);
  eval.get("n_batches", c.eval.n_batches);
  eval.get("ece_bins", c.eval.ece_bins);
  eval.get("failure_threshold", c.eval.failure_threshold);
  eval.get_optional("dyadic_seed", c.dyadic_seed);
  eval.get_optional("index_seed", c.index_seed);
  eval.finish();

  root.finish();
  c.validate();
  return c;
}

json RunConfig::to_json() const {
  json epinet = ennshift::to_json(models.epinet);
  epinet.erase("seed");
  const EvalConfig e = eval_config();
  json j = {
      {"seed", seed},
      {"data",
       {{"classes", data.classes},
        {"in_dist", data.in_dist},
        {"train", data.train},
        {"val", data.val},
        {"test", data.test},
        {"grating",
         {{"frequency", data.grating.frequency},
          {"amplitude_min", data.grating.amplitude_min},
          {"amplitude_max", data.grating.amplitude_max},
          {"noise_sigma", data.grating.noise_sigma}}},
        {"class_subset", data.class_subset},
        {"corruptions", corruption_names()},
        {"severities", data.severities}}},
      {"models",
       {{"ladder", models.ladder},
        {"base_channels", models.base_channels},
        {"strides", models.strides},
        {"kernel", models.kernel},
        {"ensemble_sizes", models.ensemble_sizes},
        {"ensemble_pool", models.ensemble_pool},
        {"ensemble_rung", models.ensemble_rung},
        {"member_order", models.member_order},
        {"baseline_rung", models.baseline_rung},
        {"epinet", std::move(epinet)}}},
      {"base_train", train_json(base_train)},
      {"epinet_train", train_json(epinet_train)},
      {"eval",
       {{"n_index", e.n_index},
        {"tau", e.tau},
        {"n_batches", e.n_batches},
        {"ece_bins", e.ece_bins},
        {"failure_threshold", e.failure_threshold},
        {"dyadic_seed", e.seed},
        {"index_seed", e.index_seed}}},
  };
  return j;
}

void RunConfig::validate() const {
  check(data.classes >= 2 && data.classes <= 10, "data.classes", "must be in [2, 10]");
  check(!data.in_dist.empty() && data.in_dist.size() < data.classes, "data.in_dist",
        "must be a strict, non-empty subset of the classes");
  std::set<int> seen;
  for (int c : data.in_dist) {
    check(c >= 0 && static_cast<std::size_t>(c) < data.classes && seen.insert(c).second,
          "data.in_dist", "class ids must be distinct and below data.classes");
  }
  check(data.train > 0 && data.val > 0 && data.test > 0, "data", "split sizes must be positive");
  check(!data.class_subset.empty(), "data.class_subset", "must not be empty");
  for (int c : data.class_subset) {
    check(c >= 0 && static_cast<std::size_t>(c) < data.in_dist.size(), "data.class_subset",
          "entries must index in-distribution classes");
  }
  for (const std::string& name : data.corruptions) {
    try {
      corruption_from_string(name);
    } catch (const ContractError&) {
      throw ConfigError("data.corruptions: unknown corruption type '" + name + "'");
    }
  }
  check(!data.severities.empty(), "data.severities", "must not be empty");
  for (int s : data.severities) {
    check(s >= 1 && s <= kSeverityLevels, "data.severities", "entries must be in 1..5");
  }
  check(data.grating.noise_sigma >= 0.0, "data.grating.noise_sigma", "must be non-negative");
  check(data.grating.amplitude_min >= 0.0 &&
            data.grating.amplitude_min <= data.grating.amplitude_max,
        "data.grating", "amplitude_min must be in [0, amplitude_max]");

  check(!models.ladder.empty(), "models.ladder", "must not be empty");
  for (std::size_t m : models.ladder) check(m > 0, "models.ladder", "multipliers must be positive");
  check(!models.base_channels.empty(), "models.base_channels", "must not be empty");
  for (std::size_t c : models.base_channels) {
    check(c > 0, "models.base_channels", "must be positive");
  }
  check(models.strides.empty() || models.strides.size() == models.base_channels.size(),
        "models.strides", "must be empty or match models.base_channels");
  check(models.kernel > 0, "models.kernel", "must be positive");
  check(models.ensemble_pool > 0, "models.ensemble_pool", "must be positive");
  for (std::size_t k : models.ensemble_sizes) {
    check(k >= 1 && k <= models.ensemble_pool, "models.ensemble_sizes",
          "sizes must be in [1, ensemble_pool]");
  }
  check(models.ensemble_rung < models.ladder.size(), "models.ensemble_rung",
        "must index models.ladder");
  check(models.baseline_rung < models.ladder.size(), "models.baseline_rung",
        "must index models.ladder");
  if (!models.member_order.empty()) {
    std::vector<std::size_t> sorted = models.member_order;
    std::sort(sorted.begin(), sorted.end());
    bool perm = sorted.size() == models.ensemble_pool;
    for (std::size_t i = 0; perm && i < sorted.size(); ++i) perm = sorted[i] == i;
    check(perm, "models.member_order", "must be a permutation of the pool member ids");
  }
  check(models.epinet.index_dim > 0, "models.epinet.index_dim", "must be positive");
  check(!models.epinet.hidden.empty(), "models.epinet.hidden", "must not be empty");

  for (const auto& [name, t] : {std::pair{"base_train", &base_train},
                                std::pair{"epinet_train", &epinet_train}}) {
    try {
      t->validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(name) + ": " + e.what());
    }
  }
  check(eval.n_index >= 1, "eval.n_index", "must be at least 1");
  check(eval.tau >= 2, "eval.tau", "must be at least 2");
  check(eval.n_batches >= 1, "eval.n_batches", "must be at least 1");
  check(eval.ece_bins >= 1, "eval.ece_bins", "must be at least 1");
  check(eval.failure_threshold > 0.0 && eval.failure_threshold < 1.0, "eval.failure_threshold",
        "must be in (0, 1)");
}

std::vector<std::string> RunConfig::corruption_names() const {
  if (!data.corruptions.empty()) return data.corruptions;
  std::vector<std::string> out;
  for (Corruption c : all_corruptions()) out.emplace_back(to_string(c));
  return out;
}

ConvNetSpec RunConfig::rung_spec(std::size_t rung) const {
  ConvNetSpec spec;
  spec.image_shape = {1, kImageSize, kImageSize};
  spec.channels.clear();
  for (std::size_t c : models.base_channels) spec.channels.push_back(c * models.ladder.at(rung));
  spec.strides = models.strides;
  spec.kernel = models.kernel;
  spec.classes = data.in_dist.size();
  return spec;
}

EvalConfig RunConfig::eval_config() const {
  EvalConfig e = eval;
  e.seed = dyadic_seed.value_or(derive_seed(seed, kDyadicStream));
  e.index_seed = index_seed.value_or(derive_seed(seed, kIndexStream));
  return e;
}

std::uint64_t RunConfig::base_seed(std::size_t rung) const { return derive_seed(seed, 100 + rung); }
std::uint64_t RunConfig::pool_seed() const { return derive_seed(seed, 200); }
std::uint64_t RunConfig::epinet_seed(std::size_t rung) const {
  return derive_seed(seed, 300 + rung);
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return RunConfig::from_json(j);
}

// --- pipeline ----------------------------------------------------------------

Pipeline::Pipeline(RunConfig config, fs::path out, std::size_t jobs)
    : config_(std::move(config)), out_(std::move(out)), jobs_(std::max<std::size_t>(1, jobs)) {
  config_.validate();
}

fs::path Pipeline::base_path(std::size_t rung) const {
  return out_ / "checkpoints" / ("base-w" + std::to_string(config_.models.ladder.at(rung)) + ".enn");
}
fs::path Pipeline::epinet_path(std::size_t rung) const {
  return out_ / "checkpoints" /
         ("epinet-w" + std::to_string(config_.models.ladder.at(rung)) + ".enn");
}
fs::path Pipeline::pool_path() const { return out_ / "checkpoints" / "ensemble-pool.enn"; }
fs::path Pipeline::suite_manifest_path() const { return out_ / "data" / "suite_manifest.json"; }
fs::path Pipeline::manifest_path() const { return out_ / "manifest.json"; }
fs::path Pipeline::reports_dir() const { return out_ / "reports"; }

std::string Pipeline::fingerprint(const json& part) const {
  const std::string text = part.dump();
  return sha256_hex(std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

bool Pipeline::up_to_date(const fs::path& ckpt, const std::string& fp) const {
  if (!fs::exists(ckpt)) return false;
  try {
    const json meta = read_checkpoint_metadata(ckpt);
    if (meta.value("config_fingerprint", "") != fp) return false;
    read_checkpoint(ckpt);  // verifies the payload digest
    if (fs::exists(manifest_path())) {
      const json manifest = json::parse(read_text_file(manifest_path()));
      const std::string rel = fs::relative(ckpt, out_).generic_string();
      const json artifacts = manifest.value("artifacts", json::object());
      for (const auto& [name, entry] : artifacts.items()) {
        if (entry.value("path", "") == rel && entry.value("digest", "") != meta.value("digest", "")) {
          return false;
        }
      }
    }
    return true;
  } catch (const Error&) {
    return false;
  }
}

void Pipeline::record(const std::string& name, const fs::path& path, const std::string& kind) {
  json manifest = json::object();
  if (fs::exists(manifest_path())) manifest = json::parse(read_text_file(manifest_path()));
  manifest["config_digest"] = fingerprint(config_.to_json());
  std::string digest;
  if (kind == "suite") {
    digest = sha256_file(path);
  } else {
    digest = read_checkpoint_metadata(path).value("digest", "");
  }
  manifest["artifacts"][name] = {
      {"path", fs::relative(path, out_).generic_string()}, {"kind", kind}, {"digest", digest}};
  write_text_file(manifest_path(), manifest.dump(2) + "\n");
}

void Pipeline::echo_config() const {
  write_text_file(out_ / "config.resolved.json", config_.to_json().dump(2) + "\n");
}

fs::path Pipeline::require(const fs::path& path, const std::string& what) const {
  if (!fs::exists(path)) {
    throw MissingArtifactError(what + " not found at " + path.string());
  }
  return path;
}

Pipeline::CleanData Pipeline::clean_data() const {
  const auto& d = config_.data;
  auto split = [&](std::size_t n, std::uint64_t stream, const char* name) {
    ImageDataset all = generate_dataset(n, d.classes, derive_seed(config_.seed, stream), d.grating);
    all.split = name;
    return make_ood_split(d.classes, d.in_dist, all);
  };
  CleanData out;
  out.train = split(d.train, kTrainDataStream, "train").in_dist;
  out.val = split(d.val, kValDataStream, "val").in_dist;
  OodSplit test = split(d.test, kTestDataStream, "test");
  out.test = std::move(test.in_dist);
  out.ood = std::move(test.ood);
  return out;
}

void Pipeline::train_base() {
  echo_config();
  const std::size_t rungs = config_.models.ladder.size();
  std::vector<std::string> fps(rungs);
  std::vector<std::size_t> todo;
  for (std::size_t r = 0; r < rungs; ++r) {
    fps[r] = fingerprint({{"kind", "base"},
                          {"seed", config_.base_seed(r)},
                          {"data", config_.to_json()["data"]},
                          {"arch", config_.to_json()["models"]["base_channels"]},
                          {"multiplier", config_.models.ladder[r]},
                          {"strides", config_.models.strides},
                          {"kernel", config_.models.kernel},
                          {"train", train_json(config_.base_train)}});
    if (!up_to_date(base_path(r), fps[r])) todo.push_back(r);
  }
  if (!todo.empty()) {
    const ImageDataset train = clean_data().train;
    parallel_for(todo.size(), jobs_, [&](std::size_t i) {
      const std::size_t r = todo[i];
      TrainConfig tc = config_.base_train;
      tc.seed = config_.base_seed(r);
      TrainLog log;
      auto net = ennshift::train_base(config_.rung_spec(r), train, tc, &log);
      net->set_id("base-w" + std::to_string(config_.models.ladder[r]));
      save_checkpoint(*net, base_path(r), tc,
                      {{"config_fingerprint", fps[r]},
                       {"rung", r},
                       {"training_log",
                        {{"epoch_loss", log.epoch_loss},
                         {"steps", log.steps},
                         {"final_train_accuracy", log.final_train_accuracy}}}});
    });
    trainings_ += todo.size();
  }
  for (std::size_t r = 0; r < rungs; ++r) {
    record("base-w" + std::to_string(config_.models.ladder[r]), base_path(r), "base");
  }
}

void Pipeline::train_epinet() {
  echo_config();
  const std::size_t rungs = config_.models.ladder.size();
  std::vector<std::string> fps(rungs);
  std::vector<std::size_t> todo;
  for (std::size_t r = 0; r < rungs; ++r) {
    require(base_path(r), "base checkpoint for ladder rung " + std::to_string(r));
    json epinet = ennshift::to_json(config_.models.epinet);
    epinet["seed"] = config_.epinet_seed(r);
    fps[r] = fingerprint({{"kind", "epinet"},
                          {"base_digest", read_checkpoint_metadata(base_path(r)).value("digest", "")},
                          {"epinet", epinet},
                          {"train", train_json(config_.epinet_train)}});
    if (!up_to_date(epinet_path(r), fps[r])) todo.push_back(r);
  }
  if (!todo.empty()) {
    const ImageDataset train = clean_data().train;
    parallel_for(todo.size(), jobs_, [&](std::size_t i) {
      const std::size_t r = todo[i];
      std::shared_ptr<const BaseNet> base = load_base(base_path(r));
      EpinetConfig ec = config_.models.epinet;
      ec.seed = config_.epinet_seed(r);
      TrainConfig tc = config_.epinet_train;
      tc.seed = derive_seed(ec.seed, 1);
      TrainLog log;
      auto model = ennshift::train_epinet(base, train, tc, ec, &log);
      model->set_id("epinet-w" + std::to_string(config_.models.ladder[r]));
      save_checkpoint(*model, epinet_path(r), tc,
                      {{"config_fingerprint", fps[r]},
                       {"rung", r},
                       {"base_checkpoint", fs::relative(base_path(r), out_).generic_string()},
                       {"training_log",
                        {{"epoch_loss", log.epoch_loss}, {"steps", log.steps}}}});
    });
    trainings_ += todo.size();
  }
  for (std::size_t r = 0; r < rungs; ++r) {
    record("epinet-w" + std::to_string(config_.models.ladder[r]), epinet_path(r), "epinet");
  }
}

void Pipeline::train_ensemble() {
  echo_config();
  const std::size_t rung = config_.models.ensemble_rung;
  const std::string fp = fingerprint({{"kind", "ensemble"},
                                      {"seed", config_.pool_seed()},
                                      {"data", config_.to_json()["data"]},
                                      {"arch", config_.to_json()["models"]["base_channels"]},
                                      {"multiplier", config_.models.ladder[rung]},
                                      {"strides", config_.models.strides},
                                      {"kernel", config_.models.kernel},
                                      {"pool", config_.models.ensemble_pool},
                                      {"train", train_json(config_.base_train)}});
  if (!up_to_date(pool_path(), fp)) {
    TrainConfig tc = config_.base_train;
    tc.seed = config_.pool_seed();
    auto pool = ennshift::train_ensemble(config_.rung_spec(rung), clean_data().train, tc,
                                         config_.models.ensemble_pool, jobs_);
    pool->set_id("ensemble-pool");
    save_checkpoint(*pool, pool_path(), tc, {{"config_fingerprint", fp}, {"rung", rung}});
    trainings_ += config_.models.ensemble_pool;
  }
  record("ensemble-pool", pool_path(), "ensemble");
}

void Pipeline::make_shifts() {
  echo_config();
  require(pool_path(), "ensemble pool checkpoint (adversarial-split reference; run train-ensemble)");
  const auto pool = load_ensemble(pool_path());
  const std::size_t reference_member =
      config_.models.member_order.empty() ? 0 : config_.models.member_order.front();
  std::shared_ptr<const EnnModel> reference = pool->members().at(reference_member);

  CleanData clean = clean_data();
  const fs::path dir = out_ / "data";
  json datasets = json::array();
  auto store = [&](const std::string& name, const ImageDataset& d) {
    const fs::path p = dir / dataset_file(name);
    const std::string digest = save_dataset(d, p);
    datasets.push_back({{"name", name},
                        {"path", fs::relative(p, out_).generic_string()},
                        {"split", d.split},
                        {"examples", d.size()},
                        {"provenance", d.provenance},
                        {"digest", digest}});
  };
  clean.val.split = "val";
  clean.test.split = "test";
  store("val", clean.val);
  store("clean", clean.test);
  store("ood", clean.ood);
  const std::uint64_t corruption_seed = derive_seed(config_.seed, kCorruptionStream);
  for (const std::string& type : config_.corruption_names()) {
    for (int severity : config_.data.severities) {
      store(type + "/" + std::to_string(severity),
            corrupt(clean.test, type, severity, corruption_seed));
    }
  }
  ImageDataset adversarial =
      make_adversarial_split(reference, clean.test, config_.data.class_subset);
  adversarial.provenance["reference_member"] = reference_member;
  store("adversarial", adversarial);

  json severity_tables = json::object();
  for (const std::string& type : config_.corruption_names()) {
    const auto& table = severity_table(corruption_from_string(type));
    severity_tables[type] = std::vector<double>(table.begin(), table.end());
  }
  const json manifest = {{"seed", config_.seed},
                         {"classes", config_.data.classes},
                         {"in_dist", config_.data.in_dist},
                         {"class_subset", config_.data.class_subset},
                         {"reference_model", reference->id()},
                         {"reference_checkpoint", read_checkpoint_metadata(pool_path()).value("digest", "")},
                         {"severity_tables", severity_tables},
                         {"datasets", datasets}};
  write_text_file(suite_manifest_path(), manifest.dump(2) + "\n");
  record("suite", suite_manifest_path(), "suite");
}

ShiftSuite Pipeline::load_suite() const {
  require(suite_manifest_path(), "suite manifest (run make-shifts)");
  const json manifest = json::parse(read_text_file(suite_manifest_path()));
  ShiftSuite suite;
  suite.class_subset = manifest.at("class_subset").get<std::vector<int>>();
  suite.reference_model = manifest.at("reference_model").get<std::string>();
  for (const json& entry : manifest.at("datasets")) {
    const std::string name = entry.at("name");
    if (name == "val") continue;
    const fs::path p = require(out_ / entry.at("path").get<std::string>(), "dataset " + name);
    ImageDataset d = load_dataset(p);
    if (name == "clean") {
      suite.clean = std::move(d);
    } else if (name == "ood") {
      suite.ood = std::move(d);
    } else if (name == "adversarial") {
      suite.adversarial = std::move(d);
    } else {
      suite.corrupted.push_back(std::move(d));
    }
  }
  return suite;
}

ImageDataset Pipeline::load_validation() const {
  return load_dataset(require(out_ / "data" / dataset_file("val"), "validation split (run make-shifts)"));
}

std::vector<NamedModel> Pipeline::load_models() const {
  std::vector<NamedModel> out;
  for (std::size_t r = 0; r < config_.models.ladder.size(); ++r) {
    auto base = load_base(require(base_path(r), "base checkpoint for ladder rung " + std::to_string(r)));
    out.push_back({base->id(), base});
  }
  for (std::size_t r = 0; r < config_.models.ladder.size(); ++r) {
    auto epinet =
        load_epinet(require(epinet_path(r), "epinet checkpoint for ladder rung " + std::to_string(r)));
    out.push_back({epinet->id(), epinet});
  }
  const auto pool = load_ensemble(require(pool_path(), "ensemble pool checkpoint"));
  std::vector<std::size_t> order = config_.models.member_order;
  if (order.empty()) {
    for (std::size_t m = 0; m < pool->size(); ++m) order.push_back(m);
  }
  for (std::size_t k : config_.models.ensemble_sizes) {
    auto sub = std::make_shared<EnsembleModel>(subensemble(*pool, k, order));
    sub->set_id("ensemble-" + std::to_string(k));
    out.push_back({sub->id(), sub});
  }
  return out;
}

std::vector<ReportRow> suite_rows(const SuiteMetrics& s, const ErrorGrid& baseline_errors,
                                  std::uint64_t seed) {
  std::vector<ReportRow> rows;
  add_dataset_rows(rows, s, s.clean, seed);
  for (const DatasetMetrics& m : s.corrupted) add_dataset_rows(rows, s, m, seed);
  if (s.adversarial) add_dataset_rows(rows, s, *s.adversarial, seed);
  rows.push_back({s.model, s.model_size_params, "ood", "", 0, "aupr", s.aupr, s.temperature, seed});
  rows.push_back({s.model, s.model_size_params, "ood", "", 0, "confidence", s.ood_confidence,
                  s.temperature, seed});
  if (!s.corrupted.empty() && !baseline_errors.empty()) {
    rows.push_back({s.model, s.model_size_params, "corrupted", "", 0, "mce",
                    mce(s.corruption_errors(), baseline_errors), s.temperature, seed});
  }
  return rows;
}

void Pipeline::evaluate() {
  echo_config();
  const ShiftSuite suite = load_suite();
  const std::vector<NamedModel> models = load_models();
  const EvalConfig ec = config_.eval_config();
  std::vector<SuiteMetrics> results(models.size());
  parallel_for(models.size(), jobs_, [&](std::size_t i) {
    results[i] = evaluate_suite(*models[i].model, suite, ec);
  });
  const std::string baseline = "base-w" + std::to_string(config_.models.ladder[config_.models.baseline_rung]);
  ErrorGrid baseline_errors;
  for (const SuiteMetrics& s : results) {
    if (s.model == baseline) baseline_errors = s.corruption_errors();
  }
  MetricsReport report;
  auto& rows = report.experiments["metrics"];
  for (const SuiteMetrics& s : results) {
    const auto r = suite_rows(s, baseline_errors, config_.seed);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  report.notes.push_back("mCE baseline: " + baseline);
  report.notes.push_back("predictive distributions use " + std::to_string(ec.n_index) +
                         " sampled epistemic indices for epinets; ensembles enumerate members");
  report.notes.push_back(
      "evaluation randomness comes only from epistemic index sampling (index_seed " +
      std::to_string(ec.index_seed) + "); base and ensemble rows are exactly reproducible");
  write_report(report, reports_dir() / "evaluate");
}

void Pipeline::tune_temp() {
  echo_config();
  const ImageDataset val = load_validation();
  const std::vector<NamedModel> models = load_models();
  const EvalConfig ec = config_.eval_config();
  std::vector<Temperature> temps(models.size());
  parallel_for(models.size(), jobs_, [&](std::size_t i) {
    const PredictionSet preds = predict(*models[i].model, val.images, ec.n_index,
                                        derive_seed(ec.index_seed, stable_hash("validation")));
    temps[i] = tune_temperature(preds, val.labels, "val");
  });
  json out = json::object();
  MetricsReport report;
  auto& rows = report.experiments["temperatures"];
  for (std::size_t i = 0; i < models.size(); ++i) {
    out[models[i].name] = {{"temperature", temps[i].value}, {"tuned_on", temps[i].tuned_on}};
    rows.push_back({models[i].name, models[i].model->parameter_count(), "val", "", 0,
                    "temperature", temps[i].value, temps[i].value, config_.seed});
  }
  write_text_file(out_ / "temperatures.json", out.dump(2) + "\n");
  write_report(report, reports_dir() / "tune-temp");
}

void Pipeline::temp_report() {
  echo_config();
  require(out_ / "temperatures.json", "tuned temperatures (run tune-temp)");
  const json temps = json::parse(read_text_file(out_ / "temperatures.json"));
  const ShiftSuite suite = load_suite();
  const std::vector<NamedModel> models = load_models();
  const EvalConfig ec = config_.eval_config();
  std::vector<std::vector<SuiteMetrics>> results(models.size());
  parallel_for(models.size(), jobs_, [&](std::size_t i) {
    if (!temps.contains(models[i].name)) {
      throw MissingArtifactError("no tuned temperature for model " + models[i].name);
    }
    const double t = temps.at(models[i].name).at("temperature").get<double>();
    const double both[] = {1.0, t};
    results[i] = evaluate_suite(*models[i].model, suite, ec, both);
  });
  const std::string baseline = "base-w" + std::to_string(config_.models.ladder[config_.models.baseline_rung]);
  ErrorGrid baseline_errors;
  for (const auto& r : results) {
    if (r[0].model == baseline) baseline_errors = r[0].corruption_errors();
  }
  MetricsReport report;
  auto& ratio_rows = report.experiments["temperature_ratios"];
  auto& metric_rows = report.experiments["temperature_metrics"];
  for (const auto& r : results) {
    const SuiteMetrics& without = r[0];
    const SuiteMetrics& with = r[1];
    for (const SuiteMetrics* s : {&without, &with}) {
      const auto rows = suite_rows(*s, baseline_errors, config_.seed);
      metric_rows.insert(metric_rows.end(), rows.begin(), rows.end());
    }
    for (const RatioRecord& rec : temperature_ratio_report(without, with, baseline_errors)) {
      if (!rec.ratio) {
        report.notes.push_back(with.model + " " + rec.dataset + " " + rec.metric + ": " + rec.note);
        continue;
      }
      ratio_rows.push_back({with.model, with.model_size_params, rec.dataset, "", 0, rec.metric,
                            *rec.ratio, with.temperature, config_.seed});
    }
  }
  report.notes.push_back("ratios are metric(with T) / metric(without T); T tuned on the clean validation split");
  write_report(report, reports_dir() / "temp-report");
}

void Pipeline::run_all() {
  train_base();
  train_ensemble();
  train_epinet();
  make_shifts();
  evaluate();
  tune_temp();
  temp_report();
}

}  // namespace ennshift
