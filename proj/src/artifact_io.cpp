#include "ennshift/artifact_io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <tuple>

#include "ennshift/errors.hpp"

namespace ennshift {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kFormatVersion = 1;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_f32(std::vector<unsigned char>& out, float f) {
  put_u32(out, std::bit_cast<std::uint32_t>(f));
}

class Reader {
 public:
  explicit Reader(std::span<const unsigned char> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw DigestError("checkpoint payload truncated at byte " + std::to_string(pos_));
    }
  }
  std::span<const unsigned char> bytes_;
  std::size_t pos_ = 0;
};

std::vector<unsigned char> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return bytes;
}

// Writes through a temporary sibling so readers never see a partial file.
void write_bytes(const fs::path& path, std::span<const char> bytes) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string());
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + path.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string());
}

struct Header {
  json metadata;
  std::size_t payload_offset = 0;
};

Header parse_header(std::span<const unsigned char> bytes, const fs::path& path) {
  if (bytes.size() < 8) {
    throw FormatError(path.string() + ": file too short for a checkpoint header (" +
                      std::to_string(bytes.size()) + " bytes)");
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw FormatError(path.string() + ": bad magic at byte 0");
  }
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(bytes[4 + i]) << (8 * i);
  if (bytes.size() - 8 < len) {
    throw FormatError(path.string() + ": metadata block truncated at byte " +
                      std::to_string(bytes.size()));
  }
  Header h;
  try {
    h.metadata = json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": metadata is not valid JSON: " + e.what());
  }
  h.payload_offset = 8 + len;
  return h;
}

void add_network(std::vector<NamedTensor>& out, const Network& net, const std::string& prefix) {
  const std::vector<std::string> names = net.parameter_names();
  const std::vector<Tensor>& params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto d = params[i].data();
    out.push_back({prefix + names[i], params[i].shape(), std::vector<float>(d.begin(), d.end())});
  }
}

Network restore_network(const Checkpoint& ckpt, const json& arch, const std::string& prefix) {
  Network net = network_from_architecture(arch);
  const std::vector<std::string> names = net.parameter_names();
  std::vector<Tensor>& params = net.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const NamedTensor& t = ckpt.tensor(prefix + names[i]);
    if (t.shape != params[i].shape()) {
      throw FormatError("tensor " + t.name + " has shape " + shape_string(t.shape) +
                        ", architecture expects " + shape_string(params[i].shape()));
    }
    auto dst = params[i].mutable_data();
    std::copy(t.data.begin(), t.data.end(), dst.begin());
  }
  return net;
}

json base_metadata(const std::string& kind, const std::string& name, std::size_t params,
                   const TrainConfig& config, const json& extra) {
  json meta = {{"format_version", kFormatVersion},
               {"kind", kind},
               {"name", name},
               {"parameter_count", params},
               {"train_config", to_json(config)},
               {"seeds", {{"train", config.seed}}}};
  for (auto it = extra.begin(); it != extra.end(); ++it) meta[it.key()] = it.value();
  return meta;
}

void require_kind(const Checkpoint& ckpt, const std::string& kind, const fs::path& path) {
  const std::string got = ckpt.metadata.value("kind", "");
  if (got != kind) {
    throw FormatError(path.string() + ": expected a " + kind + " checkpoint, found '" + got +
                      "'");
  }
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

const NamedTensor& Checkpoint::tensor(const std::string& name) const {
  for (const NamedTensor& t : tensors) {
    if (t.name == name) return t;
  }
  throw FormatError("checkpoint has no tensor named " + name);
}

std::string sha256_hex(std::span<const unsigned char> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw DigestError("SHA-256 computation failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) {
    out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return out.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_bytes(path)); }

std::vector<unsigned char> encode_payload(const std::vector<NamedTensor>& tensors) {
  std::vector<unsigned char> out;
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const NamedTensor& t : tensors) {
    if (shape_numel(t.shape) != t.data.size()) {
      throw DimensionError("tensor " + t.name + ": shape " + shape_string(t.shape) + " vs " +
                           std::to_string(t.data.size()) + " values");
    }
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out.insert(out.end(), t.name.begin(), t.name.end());
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (std::size_t d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : t.data) put_f32(out, f);
  }
  return out;
}

std::vector<NamedTensor> decode_payload(std::span<const unsigned char> payload) {
  Reader r(payload);
  const std::uint32_t count = r.u32();
  std::vector<NamedTensor> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.str(r.u32());
    const std::uint32_t ndim = r.u32();
    for (std::uint32_t d = 0; d < ndim; ++d) t.shape.push_back(r.u32());
    const std::size_t n = shape_numel(t.shape);
    if ((payload.size() - r.pos()) / 4 < n) {
      throw DigestError("checkpoint payload truncated in tensor " + t.name);
    }
    t.data.resize(n);
    for (float& f : t.data) f = r.f32();
    out.push_back(std::move(t));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
  return out;
}

std::string write_checkpoint(const fs::path& path, Checkpoint checkpoint) {
  const std::vector<unsigned char> payload = encode_payload(checkpoint.tensors);
  const std::string digest = sha256_hex(payload);
  checkpoint.metadata["digest"] = digest;
  const std::string meta = checkpoint.metadata.dump(2);
  std::vector<unsigned char> header(kCheckpointMagic, kCheckpointMagic + 4);
  put_u32(header, static_cast<std::uint32_t>(meta.size()));
  std::vector<char> bytes;
  bytes.reserve(header.size() + meta.size() + payload.size());
  bytes.insert(bytes.end(), header.begin(), header.end());
  bytes.insert(bytes.end(), meta.begin(), meta.end());
  bytes.insert(bytes.end(), payload.begin(), payload.end());
  write_bytes(path, bytes);
  return digest;
}

Checkpoint read_checkpoint(const fs::path& path) {
  const std::vector<unsigned char> bytes = read_bytes(path);
  Header h = parse_header(bytes, path);
  const std::span<const unsigned char> payload(bytes.data() + h.payload_offset,
                                               bytes.size() - h.payload_offset);
  const std::string recorded = h.metadata.value("digest", "");
  const std::string actual = sha256_hex(payload);
  if (recorded != actual) {
    throw DigestError(path.string() + ": payload digest " + actual + " does not match recorded " +
                      (recorded.empty() ? std::string("(none)") : recorded));
  }
  Checkpoint out;
  out.metadata = std::move(h.metadata);
  out.tensors = decode_payload(payload);
  return out;
}

json read_checkpoint_metadata(const fs::path& path) {
  return parse_header(read_bytes(path), path).metadata;
}

json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"momentum", c.momentum},
          {"batch_size", c.batch_size},       {"epochs", c.epochs},
          {"weight_decay", c.weight_decay},   {"n_train_z", c.n_train_z},
          {"max_grad_norm", c.max_grad_norm}, {"seed", c.seed}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.n_train_z = j.value("n_train_z", c.n_train_z);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  c.seed = j.value("seed", c.seed);
  return c;
}

json to_json(const EpinetConfig& c) {
  return {{"index_dim", c.index_dim},
          {"hidden", c.hidden},
          {"alpha_mlp", c.alpha_mlp},
          {"alpha_conv", c.alpha_conv},
          {"prior_conv_channels", c.prior_conv_channels},
          {"prior_conv_kernel", c.prior_conv_kernel},
          {"prior_conv_stride", c.prior_conv_stride},
          {"seed", c.seed}};
}

EpinetConfig epinet_config_from_json(const json& j) {
  EpinetConfig c;
  c.index_dim = j.value("index_dim", c.index_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.alpha_mlp = j.value("alpha_mlp", c.alpha_mlp);
  c.alpha_conv = j.value("alpha_conv", c.alpha_conv);
  c.prior_conv_channels = j.value("prior_conv_channels", c.prior_conv_channels);
  c.prior_conv_kernel = j.value("prior_conv_kernel", c.prior_conv_kernel);
  c.prior_conv_stride = j.value("prior_conv_stride", c.prior_conv_stride);
  c.seed = j.value("seed", c.seed);
  return c;
}

json network_architecture(const Network& net) {
  json layers = json::array();
  for (const LayerSpec& l : net.layers()) {
    json e = {{"kind", to_string(l.kind)}};
    if (l.kind == LayerSpec::Kind::dense || l.kind == LayerSpec::Kind::conv) {
      e["in"] = l.in;
      e["out"] = l.out;
    }
    if (l.kind == LayerSpec::Kind::conv) {
      e["kernel"] = l.kernel;
      e["stride"] = l.stride;
    }
    if (l.kind == LayerSpec::Kind::shift) e["offset"] = l.offset;
    layers.push_back(std::move(e));
  }
  return {{"input_shape", net.input_shape()}, {"layers", std::move(layers)}};
}

Network network_from_architecture(const json& arch) {
  try {
    std::vector<LayerSpec> layers;
    for (const json& e : arch.at("layers")) {
      switch (layer_kind_from_string(e.at("kind").get<std::string>())) {
        case LayerSpec::Kind::dense:
          layers.push_back(LayerSpec::dense(e.at("in"), e.at("out")));
          break;
        case LayerSpec::Kind::conv:
          layers.push_back(
              LayerSpec::conv(e.at("in"), e.at("out"), e.at("kernel"), e.at("stride")));
          break;
        case LayerSpec::Kind::relu:
          layers.push_back(LayerSpec::relu());
          break;
        case LayerSpec::Kind::flatten:
          layers.push_back(LayerSpec::flatten());
          break;
        case LayerSpec::Kind::shift:
          layers.push_back(LayerSpec::shift(e.at("offset").get<double>()));
          break;
      }
    }
    return Network(arch.at("input_shape").get<Shape>(), std::move(layers),
                   {InitScheme::zeros, 0});
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed architecture: ") + e.what());
  }
}

std::string save_checkpoint(const BaseNet& model, const fs::path& path,
                            const TrainConfig& config, const json& extra) {
  Checkpoint c;
  c.metadata = base_metadata("base", model.id(), model.parameter_count(), config, extra);
  c.metadata["architecture"] = network_architecture(model.network());
  add_network(c.tensors, model.network(), "");
  return write_checkpoint(path, std::move(c));
}

std::string save_checkpoint(const EpinetModel& model, const fs::path& path,
                            const TrainConfig& config, const json& extra) {
  Checkpoint c;
  c.metadata = base_metadata("epinet", model.id(), model.parameter_count(), config, extra);
  c.metadata["epinet_config"] = to_json(model.config());
  c.metadata["seeds"]["epinet"] = model.config().seed;
  json convs = json::array();
  for (const Network& n : model.prior_convs()) convs.push_back(network_architecture(n));
  c.metadata["architecture"] = {{"base", network_architecture(model.base().network())},
                                {"base_name", model.base().id()},
                                {"learnable", network_architecture(model.learnable())},
                                {"prior_mlp", network_architecture(model.prior_mlp())},
                                {"prior_convs", std::move(convs)}};
  add_network(c.tensors, model.base().network(), "base.");
  add_network(c.tensors, model.learnable(), "learnable.");
  add_network(c.tensors, model.prior_mlp(), "prior_mlp.");
  for (std::size_t i = 0; i < model.prior_convs().size(); ++i) {
    add_network(c.tensors, model.prior_convs()[i], "prior_conv" + std::to_string(i) + ".");
  }
  return write_checkpoint(path, std::move(c));
}

std::string save_checkpoint(const EnsembleModel& model, const fs::path& path,
                            const TrainConfig& config, const json& extra) {
  Checkpoint c;
  c.metadata = base_metadata("ensemble", model.id(), model.parameter_count(), config, extra);
  json members = json::array();
  json member_seeds = json::array();
  for (std::size_t m = 0; m < model.size(); ++m) {
    members.push_back({{"name", model.member(m).id()},
                       {"architecture", network_architecture(model.member(m).network())}});
    member_seeds.push_back(config.seed + m);
    add_network(c.tensors, model.member(m).network(), "member" + std::to_string(m) + ".");
  }
  c.metadata["architecture"] = {{"members", std::move(members)}};
  c.metadata["seeds"]["members"] = std::move(member_seeds);
  return write_checkpoint(path, std::move(c));
}

std::shared_ptr<BaseNet> load_base(const fs::path& path) {
  const Checkpoint c = read_checkpoint(path);
  require_kind(c, "base", path);
  Network net = restore_network(c, c.metadata.at("architecture"), "");
  net.set_trainable(false);
  return std::make_shared<BaseNet>(std::move(net), c.metadata.value("name", "base"));
}

std::shared_ptr<EpinetModel> load_epinet(const fs::path& path) {
  const Checkpoint c = read_checkpoint(path);
  require_kind(c, "epinet", path);
  const json& arch = c.metadata.at("architecture");
  Network base_net = restore_network(c, arch.at("base"), "base.");
  base_net.set_trainable(false);
  auto base = std::make_shared<BaseNet>(std::move(base_net), arch.value("base_name", "base"));
  Network learnable = restore_network(c, arch.at("learnable"), "learnable.");
  Network prior_mlp = restore_network(c, arch.at("prior_mlp"), "prior_mlp.");
  std::vector<Network> convs;
  for (std::size_t i = 0; i < arch.at("prior_convs").size(); ++i) {
    convs.push_back(
        restore_network(c, arch.at("prior_convs")[i], "prior_conv" + std::to_string(i) + "."));
  }
  return std::make_shared<EpinetModel>(std::move(base), std::move(learnable),
                                       std::move(prior_mlp), std::move(convs),
                                       epinet_config_from_json(c.metadata.at("epinet_config")),
                                       c.metadata.value("name", "epinet"));
}

std::shared_ptr<EnsembleModel> load_ensemble(const fs::path& path) {
  const Checkpoint c = read_checkpoint(path);
  require_kind(c, "ensemble", path);
  std::vector<std::shared_ptr<const BaseNet>> members;
  const json& list = c.metadata.at("architecture").at("members");
  for (std::size_t m = 0; m < list.size(); ++m) {
    Network net = restore_network(c, list[m].at("architecture"), "member" + std::to_string(m) + ".");
    net.set_trainable(false);
    members.push_back(std::make_shared<BaseNet>(std::move(net), list[m].value("name", "member")));
  }
  return std::make_shared<EnsembleModel>(std::move(members), c.metadata.value("name", "ensemble"));
}

std::shared_ptr<EnnModel> load_model(const fs::path& path) {
  const std::string kind = read_checkpoint_metadata(path).value("kind", "");
  if (kind == "base") return load_base(path);
  if (kind == "epinet") return load_epinet(path);
  if (kind == "ensemble") return load_ensemble(path);
  throw FormatError(path.string() + ": not a model checkpoint (kind '" + kind + "')");
}

std::string save_dataset(const ImageDataset& data, const fs::path& path) {
  Checkpoint c;
  c.metadata = {{"format_version", kFormatVersion},
                {"kind", "dataset"},
                {"split", data.split},
                {"examples", data.size()},
                {"provenance", data.provenance}};
  Shape shape = data.images.defined() ? data.images.shape() : Shape{0, 1, kImageSize, kImageSize};
  std::vector<float> pixels;
  if (data.images.defined()) pixels.assign(data.images.data().begin(), data.images.data().end());
  c.tensors.push_back({"images", std::move(shape), std::move(pixels)});
  c.tensors.push_back({"labels", {data.size()},
                       std::vector<float>(data.labels.begin(), data.labels.end())});
  return write_checkpoint(path, std::move(c));
}

ImageDataset load_dataset(const fs::path& path) {
  const Checkpoint c = read_checkpoint(path);
  require_kind(c, "dataset", path);
  ImageDataset d;
  d.split = c.metadata.value("split", "");
  d.provenance = c.metadata.value("provenance", json::object());
  const NamedTensor& images = c.tensor("images");
  const NamedTensor& labels = c.tensor("labels");
  if (images.shape.empty() || images.shape[0] != labels.data.size()) {
    throw FormatError(path.string() + ": image and label counts differ");
  }
  if (!labels.data.empty()) d.images = Tensor(images.shape, images.data);
  for (float v : labels.data) d.labels.push_back(static_cast<int>(v));
  return d;
}

std::string format_value(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::vector<const ReportRow*> sorted;
  for (const ReportRow& r : rows) sorted.push_back(&r);
  auto key = [](const ReportRow* r) {
    return std::tie(r->model, r->dataset, r->corruption_type, r->severity, r->metric,
                    r->temperature, r->seed);
  };
  std::stable_sort(sorted.begin(), sorted.end(),
                   [&](const ReportRow* a, const ReportRow* b) { return key(a) < key(b); });
  std::string out = std::string(kReportHeader) + "\n";
  for (const ReportRow* r : sorted) {
    out += csv_field(r->model) + "," + std::to_string(r->model_size_params) + "," +
           csv_field(r->dataset) + "," + csv_field(r->corruption_type) + "," +
           std::to_string(r->severity) + "," + csv_field(r->metric) + "," +
           format_value(r->value) + "," + format_value(r->temperature) + "," +
           std::to_string(r->seed) + "\n";
  }
  return out;
}

std::vector<fs::path> write_report(const MetricsReport& report, const fs::path& dir) {
  std::vector<fs::path> written;
  if (report.experiments.empty()) {
    write_text_file(dir / "metrics.csv", report_csv({}));
    written.push_back(dir / "metrics.csv");
  }
  std::ostringstream summary;
  for (const auto& [name, rows] : report.experiments) {
    const fs::path p = dir / (name + ".csv");
    write_text_file(p, report_csv(rows));
    written.push_back(p);

    summary << "== " << name << " (" << rows.size() << " rows)\n";
    summary << std::left << std::setw(18) << "model" << std::setw(14) << "dataset"
            << std::setw(12) << "corruption" << std::setw(5) << "sev" << std::setw(14)
            << "metric" << std::setw(14) << "value" << "T\n";
    std::vector<ReportRow> sorted = rows;
    std::stable_sort(sorted.begin(), sorted.end(), [](const ReportRow& a, const ReportRow& b) {
      return std::tie(a.model, a.dataset, a.corruption_type, a.severity, a.metric, a.temperature) <
             std::tie(b.model, b.dataset, b.corruption_type, b.severity, b.metric, b.temperature);
    });
    for (const ReportRow& r : sorted) {
      char value[32], temp[32];
      std::snprintf(value, sizeof value, "%.6g", r.value);
      std::snprintf(temp, sizeof temp, "%.4g", r.temperature);
      summary << std::left << std::setw(18) << r.model << std::setw(14) << r.dataset
              << std::setw(12) << (r.corruption_type.empty() ? "-" : r.corruption_type)
              << std::setw(5) << r.severity << std::setw(14) << r.metric << std::setw(14)
              << value << temp << "\n";
    }
    summary << "\n";
  }
  for (const std::string& note : report.notes) summary << "note: " << note << "\n";
  write_text_file(dir / "summary.txt", summary.str());
  written.push_back(dir / "summary.txt");
  return written;
}

void write_text_file(const fs::path& path, const std::string& text) {
  write_bytes(path, std::span<const char>(text.data(), text.size()));
}

std::string read_text_file(const fs::path& path) {
  const std::vector<unsigned char> bytes = read_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace ennshift
