// Copyright 2026 The margindyn Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "margindyn/snapshot_io.hpp"

#include <unistd.h>

#include <charconv>
#include <cmath>
#include <cstring>
#include <limits>
#include <set>
#include <sstream>

#include "json.hpp"
#include "margindyn/errors.hpp"

namespace margindyn {

using nlohmann::json;
namespace fs = std::filesystem;

void write_file_atomic(const fs::path& path, const std::string& contents) {
  const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    out.flush();
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("cannot move output into place at '" + path.string() + "'");
  }
}

namespace {

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// Field helpers. Every failure names the field.

[[noreturn]] void invalid(const std::string& field, const std::string& msg, std::size_t line) {
  throw ValidationError("field '" + field + "': " + msg, line);
}

double as_finite(const json& v, const std::string& field, std::size_t line) {
  if (!v.is_number()) invalid(field, "expected a number", line);
  const double d = v.get<double>();
  if (!std::isfinite(d)) invalid(field, "must be finite", line);
  return d;
}

std::optional<double> optional_number(const json& obj, const char* field, std::size_t line) {
  const auto it = obj.find(field);
  if (it == obj.end() || it->is_null()) return std::nullopt;
  return as_finite(*it, field, line);
}

std::vector<double> number_array(const json& v, const std::string& field, std::size_t line) {
  if (!v.is_array()) invalid(field, "expected an array of numbers", line);
  if (v.empty()) invalid(field, "must not be empty", line);
  std::vector<double> out;
  out.reserve(v.size());
  for (const auto& x : v) out.push_back(as_finite(x, field, line));
  return out;
}

std::size_t as_count(const json& v, const std::string& field, std::size_t line) {
  if (!v.is_number_integer()) invalid(field, "expected a non-negative integer", line);
  if (v.is_number_unsigned()) return v.get<std::size_t>();
  const auto i = v.get<std::int64_t>();
  if (i < 0) invalid(field, "expected a non-negative integer", line);
  return static_cast<std::size_t>(i);
}

std::string optional_string(const json& obj, const char* field, std::size_t line) {
  const auto it = obj.find(field);
  if (it == obj.end() || it->is_null()) return {};
  if (!it->is_string()) invalid(field, "expected a string", line);
  return it->get<std::string>();
}

json parse_json_line(const std::string& text, std::size_t line) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("malformed JSON: ") + e.what(), line);
  }
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

template <typename T>
json optional_json(const std::optional<T>& v) {
  return v ? json(*v) : json(nullptr);
}

}  // namespace

// ---------------------------------------------------------------------------
// Runs

RunManifest parse_manifest(const std::string& text, std::size_t line) {
  const json j = parse_json_line(text, line);
  if (!j.is_object()) throw ValidationError("manifest must be a JSON object", line);
  RunManifest m;
  const auto ver = j.find("schema_version");
  if (ver == j.end()) invalid("schema_version", "missing", line);
  if (!ver->is_number_integer() || ver->get<std::int64_t>() != kRunSchemaVersion) {
    invalid("schema_version", "unsupported version (expected " + std::to_string(kRunSchemaVersion) + ")", line);
  }
  m.schema_version = kRunSchemaVersion;
  const auto k = j.find("num_classes");
  if (k == j.end()) invalid("num_classes", "missing", line);
  m.num_classes = as_count(*k, "num_classes", line);
  if (m.num_classes < 2) invalid("num_classes", "must be >= 2", line);
  if (const auto it = j.find("n_train"); it != j.end()) m.n_train = as_count(*it, "n_train", line);
  if (const auto it = j.find("n_test"); it != j.end()) m.n_test = as_count(*it, "n_test", line);
  m.normalization_method = optional_string(j, "normalization_method", line);
  m.creator = optional_string(j, "creator", line);
  m.notes = optional_string(j, "notes", line);
  return m;
}

RunRecord parse_record(const std::string& text, std::size_t line) {
  const json j = parse_json_line(text, line);
  if (!j.is_object()) throw ValidationError("record must be a JSON object", line);
  RunRecord r;
  const auto ep = j.find("epoch");
  if (ep == j.end()) invalid("epoch", "missing", line);
  if (!ep->is_number_integer()) invalid("epoch", "expected an integer", line);
  r.epoch = ep->get<std::int64_t>();

  r.lipschitz = optional_number(j, "lipschitz", line);
  if (r.lipschitz && !(*r.lipschitz > 0.0)) invalid("lipschitz", "must be > 0", line);
  if (const auto it = j.find("weights"); it != j.end() && !it->is_null()) {
    if (!it->is_string()) invalid("weights", "expected a directory path string", line);
    r.weights = it->get<std::string>();
  }
  if (!r.lipschitz && !r.weights) invalid("lipschitz", "missing (and no 'weights' directory given)", line);

  const auto tr = j.find("train_margins");
  if (tr == j.end()) invalid("train_margins", "missing", line);
  r.train_margins = number_array(*tr, "train_margins", line);
  if (const auto it = j.find("test_margins"); it != j.end() && !it->is_null()) {
    r.test_margins = number_array(*it, "test_margins", line);
  }
  r.train_loss = optional_number(j, "train_loss", line);
  r.train_error = optional_number(j, "train_error", line);
  r.test_error = optional_number(j, "test_error", line);
  return r;
}

std::string serialize_manifest(const RunManifest& m) {
  json j;
  j["schema_version"] = m.schema_version;
  j["num_classes"] = m.num_classes;
  j["n_train"] = m.n_train;
  j["n_test"] = m.n_test;
  j["normalization_method"] = m.normalization_method;
  j["creator"] = m.creator;
  j["notes"] = m.notes;
  return j.dump();
}

std::string serialize_record(const RunRecord& r) {
  json j;
  j["epoch"] = r.epoch;
  if (r.lipschitz) j["lipschitz"] = *r.lipschitz;
  if (r.weights) j["weights"] = *r.weights;
  j["train_margins"] = r.train_margins;
  if (r.test_margins) j["test_margins"] = *r.test_margins;
  if (r.train_loss) j["train_loss"] = *r.train_loss;
  if (r.train_error) j["train_error"] = *r.train_error;
  if (r.test_error) j["test_error"] = *r.test_error;
  return j.dump();
}

RunReader::RunReader(const fs::path& path) : in_(path, std::ios::binary) {
  if (!in_) throw IoError("cannot open run file '" + path.string() + "'");
  std::string line;
  while (std::getline(in_, line)) {
    ++line_no_;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    manifest_ = parse_manifest(line, line_no_);
    return;
  }
  throw FormatError("run file is empty; the first line must be the manifest", 1);
}

std::optional<RunRecord> RunReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++line_no_;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    return parse_record(line, line_no_);
  }
  return std::nullopt;
}

Run read_run(const fs::path& path) {
  RunReader reader(path);
  Run run;
  run.manifest = reader.manifest();
  std::set<std::int64_t> seen;
  while (auto rec = reader.next()) {
    if (!seen.insert(rec->epoch).second) {
      throw ValidationError("field 'epoch': duplicate epoch " + std::to_string(rec->epoch), reader.line());
    }
    run.records.push_back(std::move(*rec));
  }
  return run;
}

void write_run(const fs::path& path, const RunManifest& manifest, const std::vector<RunRecord>& records) {
  std::string out = serialize_manifest(manifest);
  out += '\n';
  for (const auto& r : records) {
    out += serialize_record(r);
    out += '\n';
  }
  write_file_atomic(path, out);
}

// ---------------------------------------------------------------------------
// Tensors

namespace {

constexpr std::uint8_t kMagic[4] = {0x4D, 0x54, 0x45, 0x4E};

template <typename U>
void put_le(std::vector<std::uint8_t>& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename U>
U get_le(const std::vector<std::uint8_t>& in, std::size_t& pos) {
  if (in.size() - pos < sizeof(U)) throw FormatError("MTEN: truncated header");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(in[pos + i]) << (8 * i);
  pos += sizeof(U);
  return v;
}

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t, TensorDtype dtype) {
  if (t.rank() < 1 || t.rank() > 8) throw FormatError("MTEN supports 1 to 8 dimensions");
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kTensorFormatVersion);
  out.push_back(static_cast<std::uint8_t>(dtype));
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
  for (double v : t.values()) {
    if (dtype == TensorDtype::kF64) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      put_le(out, bits);
    } else {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      put_le(out, bits);
    }
  }
  return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 4 || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    throw FormatError("MTEN: bad magic");
  }
  std::size_t pos = 4;
  const auto version = get_le<std::uint32_t>(bytes, pos);
  if (version != kTensorFormatVersion) throw FormatError("MTEN: unsupported version " + std::to_string(version));
  const auto dtype = get_le<std::uint8_t>(bytes, pos);
  if (dtype > 1) throw FormatError("MTEN: unknown dtype " + std::to_string(dtype));
  const auto ndim = get_le<std::uint8_t>(bytes, pos);
  if (ndim < 1 || ndim > 8) throw FormatError("MTEN: ndim must be in [1, 8], got " + std::to_string(ndim));
  Shape shape;
  std::uint64_t count = 1;
  for (std::uint8_t i = 0; i < ndim; ++i) {
    const auto d = get_le<std::uint64_t>(bytes, pos);
    if (d == 0) throw FormatError("MTEN: zero-sized dimension");
    if (count > std::numeric_limits<std::uint64_t>::max() / d) throw FormatError("MTEN: element count overflows");
    count *= d;
    shape.push_back(static_cast<std::size_t>(d));
  }
  const std::size_t width = dtype == 1 ? 8 : 4;
  if (count > (bytes.size() - pos) / width || bytes.size() - pos != count * width) {
    throw FormatError("MTEN: payload has " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                      std::to_string(count * width));
  }
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(count));
  for (std::uint64_t i = 0; i < count; ++i) {
    if (dtype == 1) {
      const auto bits = get_le<std::uint64_t>(bytes, pos);
      double v;
      std::memcpy(&v, &bits, sizeof v);
      data.push_back(v);
    } else {
      const auto bits = get_le<std::uint32_t>(bytes, pos);
      float f;
      std::memcpy(&f, &bits, sizeof f);
      data.push_back(static_cast<double>(f));
    }
  }
  return Tensor(std::move(shape), std::move(data));
}

void write_tensor(const fs::path& path, const Tensor& t, TensorDtype dtype) {
  const auto bytes = encode_tensor(t, dtype);
  write_file_atomic(path, std::string(bytes.begin(), bytes.end()));
}

Tensor read_tensor(const fs::path& path) {
  const auto s = read_file(path);
  return decode_tensor(std::vector<std::uint8_t>(s.begin(), s.end()));
}

// ---------------------------------------------------------------------------
// Networks

namespace {

Tensor load_ref(const fs::path& dir, const json& ref, const std::string& layer, const std::string& field) {
  if (!ref.is_string()) throw ValidationError("layer '" + layer + "': field '" + field + "' must name an MTEN file");
  const fs::path file = dir / ref.get<std::string>();
  if (!fs::exists(file)) {
    throw ValidationError("layer '" + layer + "': dangling tensor reference '" + ref.get<std::string>() + "'");
  }
  try {
    return read_tensor(file);
  } catch (const FormatError& e) {
    throw ValidationError("layer '" + layer + "': " + ref.get<std::string>() + ": " + e.what());
  }
}

std::vector<double> load_vector(const fs::path& dir, const json& obj, const char* field, const std::string& layer,
                                bool required) {
  const auto it = obj.find(field);
  if (it == obj.end() || it->is_null()) {
    if (required) throw ValidationError("layer '" + layer + "': missing field '" + field + "'");
    return {};
  }
  if (it->is_string()) return load_ref(dir, *it, layer, field).storage();
  if (!it->is_array()) throw ValidationError("layer '" + layer + "': field '" + field + "' must be an array or file");
  std::vector<double> out;
  for (const auto& v : *it) {
    if (!v.is_number()) throw ValidationError("layer '" + layer + "': field '" + field + "' must hold numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

std::vector<LayerSpec> parse_layers(const fs::path& dir, const json& arr, const std::string& where);

LayerSpec parse_layer(const fs::path& dir, const json& j, std::size_t index, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + "[" + std::to_string(index) + "]: layer must be an object");
  LayerSpec l;
  l.id = j.value("id", where + "[" + std::to_string(index) + "]");
  if (!j.contains("kind") || !j["kind"].is_string()) throw ValidationError("layer '" + l.id + "': missing 'kind'");
  try {
    l.kind = layer_kind_from_string(j["kind"].get<std::string>());
  } catch (const EstimationError& e) {
    throw ValidationError("layer '" + l.id + "': " + e.what());
  }
  const auto number = [&](const char* field, double fallback) {
    const auto it = j.find(field);
    if (it == j.end()) return fallback;
    if (!it->is_number()) throw ValidationError("layer '" + l.id + "': field '" + field + "' must be a number");
    return it->get<double>();
  };
  switch (l.kind) {
    case LayerKind::kDense:
    case LayerKind::kConv: {
      if (!j.contains("weight")) throw ValidationError("layer '" + l.id + "': missing field 'weight'");
      Tensor w = load_ref(dir, j["weight"], l.id, "weight");
      if (l.kind == LayerKind::kDense) {
        if (w.rank() != 2) throw ValidationError("layer '" + l.id + "': dense weight must be 2-D");
        l.weight = std::move(w);
      } else {
        l.conv.weights = std::move(w);
        l.conv.stride = static_cast<std::size_t>(number("stride", 1));
        if (const auto it = j.find("padding"); it != j.end()) {
          if (it->is_number_integer()) {
            l.conv.padding.assign(l.conv.weights.rank() >= 2 ? l.conv.weights.rank() - 2 : 1, it->get<std::size_t>());
          } else if (it->is_array()) {
            for (const auto& p : *it) {
              if (!p.is_number_integer() || p.get<std::int64_t>() < 0) {
                throw ValidationError("layer '" + l.id + "': padding entries must be non-negative integers");
              }
              l.conv.padding.push_back(p.get<std::size_t>());
            }
          } else {
            throw ValidationError("layer '" + l.id + "': padding must be an integer or array");
          }
        }
      }
      if (j.contains("bias") && !j["bias"].is_null()) l.bias = load_ref(dir, j["bias"], l.id, "bias");
      break;
    }
    case LayerKind::kBatchNorm:
      l.bn.scale = load_vector(dir, j, "scale", l.id, true);
      l.bn.shift = load_vector(dir, j, "shift", l.id, false);
      l.bn.running_mean = load_vector(dir, j, "running_mean", l.id, false);
      l.bn.running_var = load_vector(dir, j, "running_var", l.id, true);
      l.bn.eps = number("eps", 1e-5);
      break;
    case LayerKind::kActivation:
      l.lipschitz = number("lipschitz", 1.0);
      break;
    case LayerKind::kPool:
      l.lipschitz = number("lipschitz", 1.0);
      l.pool_window = static_cast<std::size_t>(number("window", 1));
      break;
    case LayerKind::kResidualBlock:
      l.inner_lipschitz = number("inner_lipschitz", 1.0);
      if (j.contains("shortcut")) l.shortcut = parse_layers(dir, j["shortcut"], l.id + ".shortcut");
      if (!j.contains("mainstream")) throw ValidationError("layer '" + l.id + "': missing field 'mainstream'");
      l.mainstream = parse_layers(dir, j["mainstream"], l.id + ".mainstream");
      break;
  }
  return l;
}

std::vector<LayerSpec> parse_layers(const fs::path& dir, const json& arr, const std::string& where) {
  if (!arr.is_array()) throw ValidationError(where + ": expected an array of layers");
  std::vector<LayerSpec> out;
  for (std::size_t i = 0; i < arr.size(); ++i) out.push_back(parse_layer(dir, arr[i], i, where));
  return out;
}

std::string file_stem_for(const std::string& id, std::size_t counter) {
  std::string s;
  for (char c : id) s += (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-') ? c : '_';
  return std::to_string(counter) + "_" + s;
}

json dump_layers(const fs::path& dir, const std::vector<LayerSpec>& layers, std::size_t& counter) {
  json arr = json::array();
  for (const auto& l : layers) {
    json j;
    j["id"] = l.id;
    j["kind"] = to_string(l.kind);
    const auto stem = file_stem_for(l.id, counter++);
    switch (l.kind) {
      case LayerKind::kDense:
        write_tensor(dir / (stem + ".weight.mten"), l.weight);
        j["weight"] = stem + ".weight.mten";
        break;
      case LayerKind::kConv:
        write_tensor(dir / (stem + ".weight.mten"), l.conv.weights);
        j["weight"] = stem + ".weight.mten";
        j["stride"] = l.conv.stride;
        j["padding"] = l.conv.padding.empty() ? std::vector<std::size_t>(l.conv.spatial_rank(), 0) : l.conv.padding;
        break;
      case LayerKind::kBatchNorm:
        j["scale"] = l.bn.scale;
        j["shift"] = l.bn.shift;
        j["running_mean"] = l.bn.running_mean;
        j["running_var"] = l.bn.running_var;
        j["eps"] = l.bn.eps;
        break;
      case LayerKind::kActivation:
        j["lipschitz"] = l.lipschitz;
        break;
      case LayerKind::kPool:
        j["lipschitz"] = l.lipschitz;
        j["window"] = l.pool_window;
        break;
      case LayerKind::kResidualBlock:
        j["inner_lipschitz"] = l.inner_lipschitz;
        j["shortcut"] = dump_layers(dir, l.shortcut, counter);
        j["mainstream"] = dump_layers(dir, l.mainstream, counter);
        break;
    }
    if (l.bias) {
      write_tensor(dir / (stem + ".bias.mten"), *l.bias);
      j["bias"] = stem + ".bias.mten";
    }
    arr.push_back(std::move(j));
  }
  return arr;
}

}  // namespace

NetworkSpec read_network(const fs::path& dir) {
  const fs::path layers_file = dir / "layers.json";
  if (!fs::exists(layers_file)) throw ValidationError("network directory has no layers.json: " + dir.string());
  json j;
  try {
    j = json::parse(read_file(layers_file));
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("layers.json: malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("layers.json must hold an object");
  NetworkSpec net;
  if (const auto it = j.find("num_classes"); it != j.end()) net.num_classes = as_count(*it, "num_classes", 0);
  if (const auto it = j.find("input_shape"); it != j.end()) {
    if (!it->is_array()) invalid("input_shape", "expected an array of positive integers", 0);
    for (const auto& d : *it) {
      const auto v = as_count(d, "input_shape", 0);
      if (v == 0) invalid("input_shape", "dimensions must be positive", 0);
      net.input_shape.push_back(v);
    }
  }
  if (!j.contains("layers")) invalid("layers", "missing", 0);
  net.layers = parse_layers(dir, j["layers"], "layers");
  if (net.input_shape.empty() && !net.layers.empty() && net.layers.front().kind == LayerKind::kDense) {
    net.input_shape = {net.layers.front().weight.dim(1)};
  }
  validate_network(net);
  return net;
}

void write_network(const fs::path& dir, const NetworkSpec& net) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create network directory '" + dir.string() + "'");
  std::size_t counter = 0;
  json j;
  j["schema_version"] = 1;
  j["num_classes"] = net.num_classes;
  j["input_shape"] = net.input_shape;
  j["layers"] = dump_layers(dir, net.layers, counter);
  write_file_atomic(dir / "layers.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Train configs

TrainConfig parse_train_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("config: malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw ValidationError("config must be a JSON object");
  TrainConfig c;
  if (const auto it = j.find("base"); it != j.end()) {
    if (!it->is_string()) invalid("base", "expected \"small\" or \"large\"", 0);
    try {
      c = canonical_config(it->get<std::string>());
    } catch (const DomainError& e) {
      invalid("base", e.what(), 0);
    }
  }
  for (const auto& [key, v] : j.items()) {
    if (key == "base") continue;
    if (key == "hidden_widths") {
      if (!v.is_array()) invalid(key, "expected an array of positive integers", 0);
      c.architecture.hidden_widths.clear();
      for (const auto& w : v) c.architecture.hidden_widths.push_back(as_count(w, key, 0));
    } else if (key == "conv_channels") {
      c.architecture.conv_channels = as_count(v, key, 0);
    } else if (key == "conv_kernel") {
      c.architecture.conv_kernel = as_count(v, key, 0);
    } else if (key == "bias") {
      if (!v.is_boolean()) invalid(key, "expected true or false", 0);
      c.architecture.bias = v.get<bool>();
    } else if (key == "num_classes") {
      c.data.num_classes = as_count(v, key, 0);
    } else if (key == "n_train") {
      c.data.n_train = as_count(v, key, 0);
    } else if (key == "n_test") {
      c.data.n_test = as_count(v, key, 0);
    } else if (key == "dim") {
      c.data.dim = as_count(v, key, 0);
    } else if (key == "separation") {
      c.data.separation = as_finite(v, key, 0);
    } else if (key == "data_seed") {
      c.data.seed = as_count(v, key, 0);
    } else if (key == "corrupt_fraction") {
      c.corrupt_fraction = as_finite(v, key, 0);
    } else if (key == "epochs") {
      c.epochs = as_count(v, key, 0);
    } else if (key == "learning_rate") {
      c.learning_rate = as_finite(v, key, 0);
    } else if (key == "batch_size") {
      c.batch_size = as_count(v, key, 0);
    } else if (key == "seed") {
      c.seed = as_count(v, key, 0);
    } else if (key == "norm_method") {
      if (!v.is_string()) invalid(key, "expected \"l1\" or \"power\"", 0);
      try {
        c.norm_method = lipschitz_method_from_string(v.get<std::string>());
      } catch (const Error& e) {
        invalid(key, e.what(), 0);
      }
    } else {
      invalid(key, "unknown config key", 0);
    }
  }
  try {
    c.validate();
  } catch (const DomainError& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  return c;
}

TrainConfig read_train_config(const fs::path& path) { return parse_train_config(read_file(path)); }

std::string serialize_train_config(const TrainConfig& c) {
  json j;
  j["hidden_widths"] = c.architecture.hidden_widths;
  j["conv_channels"] = c.architecture.conv_channels;
  j["conv_kernel"] = c.architecture.conv_kernel;
  j["bias"] = c.architecture.bias;
  j["num_classes"] = c.data.num_classes;
  j["n_train"] = c.data.n_train;
  j["n_test"] = c.data.n_test;
  j["dim"] = c.data.dim;
  j["separation"] = c.data.separation;
  j["data_seed"] = c.data.seed;
  j["corrupt_fraction"] = c.corrupt_fraction;
  j["epochs"] = c.epochs;
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["norm_method"] = to_string(c.norm_method);
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Reports

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

json detection_json(const PhaseDetection& d, const std::vector<std::int64_t>& ids) {
  json j;
  j["direction"] = to_string(d.direction);
  j["transition_epoch"] = d.transition_index ? json(ids.at(*d.transition_index)) : json(nullptr);
  j["prominence"] = d.prominence;
  return j;
}

json stop_json(const EarlyStop& s, const std::vector<std::int64_t>& ids) {
  json j;
  j["epoch"] = s.epoch;
  j["value"] = s.value;
  json minima = json::array();
  for (auto i : s.local_minima) minima.push_back(ids.at(i));
  j["local_minima_epochs"] = minima;
  return j;
}

json scores_json(const std::vector<ScoredThreshold>& scores) {
  json arr = json::array();
  for (const auto& s : scores) arr.push_back({{"threshold", s.threshold}, {"rho", number_or_null(s.rho)}, {"tau", number_or_null(s.tau)}});
  return arr;
}

json matrix_json(const std::vector<std::vector<double>>& m) {
  json arr = json::array();
  for (const auto& row : m) {
    json r = json::array();
    for (double v : row) r.push_back(number_or_null(v));
    arr.push_back(std::move(r));
  }
  return arr;
}

double number_or_nan(const json& v) { return v.is_number() ? v.get<double>() : std::numeric_limits<double>::quiet_NaN(); }

PhaseDirection direction_from_string(const std::string& s) {
  for (auto d : {PhaseDirection::kIncreaseThenDecrease, PhaseDirection::kMonotoneUp, PhaseDirection::kMonotoneDown,
                 PhaseDirection::kFlat}) {
    if (to_string(d) == s) return d;
  }
  throw ValidationError("unknown phase direction '" + s + "'");
}

}  // namespace

std::string report_to_json(const AnalysisReport& r) {
  std::vector<std::int64_t> ids;
  for (const auto& c : r.curves) ids.push_back(c.epoch);

  json j;
  j["schema_version"] = 1;
  j["n_epochs"] = r.n_epochs;
  j["q"] = r.q;
  j["q_source"] = r.q_source;
  j["gamma"] = r.gamma;
  j["gamma_source"] = r.gamma_source;

  if (r.selection) {
    const auto& s = *r.selection;
    j["selection"] = {{"gamma_star", optional_json(s.gamma_star)},
                      {"gamma_rho", s.gamma_star ? json(s.gamma_rho) : json(nullptr)},
                      {"q_star", optional_json(s.q_star)},
                      {"q_rho", s.q_star ? json(s.q_rho) : json(nullptr)},
                      {"gamma_scores", scores_json(s.gamma_scores)},
                      {"q_scores", scores_json(s.q_scores)}};
  } else {
    j["selection"] = nullptr;
  }

  j["early_stop"] = {{"quantile", r.stop_quantile ? stop_json(*r.stop_quantile, ids) : json(nullptr)},
                     {"gamma", r.stop_gamma ? stop_json(*r.stop_gamma, ids) : json(nullptr)}};

  json phases = json::array();
  for (const auto& p : r.phases) {
    auto d = detection_json(p.detection, ids);
    d["q"] = p.q;
    phases.push_back(std::move(d));
  }
  j["phases"] = phases;

  if (r.dilemma) {
    json ev = json::array();
    for (const auto& e : r.dilemma->per_quantile) {
      auto d = detection_json(e.detection, ids);
      d["q"] = e.q;
      ev.push_back(std::move(d));
    }
    j["dilemma"] = {{"flag", r.dilemma->flag},
                    {"evidence", ev},
                    {"test_error_valley", r.dilemma->test_error ? detection_json(*r.dilemma->test_error, ids)
                                                                : json(nullptr)}};
  } else {
    j["dilemma"] = nullptr;
  }

  const auto& b = r.bound_params;
  json t1 = json::array(), t2 = json::array();
  for (const auto& row : r.theorem1) {
    t1.push_back({{"epoch", row.epoch},
                  {"empirical", row.terms.empirical},
                  {"complexity", row.terms.complexity},
                  {"confidence", row.terms.confidence},
                  {"total", row.terms.total}});
  }
  for (const auto& row : r.theorem2) {
    if (!row.terms) {
      t2.push_back({{"epoch", row.epoch}, {"defined", false}});
      continue;
    }
    const auto& t = *row.terms;
    t2.push_back({{"epoch", row.epoch},
                  {"defined", true},
                  {"quantile_margin", t.quantile_margin},
                  {"c_q", t.c_q},
                  {"confidence", t.confidence},
                  {"loglog", t.loglog},
                  {"complexity", t.complexity},
                  {"total", t.total},
                  {"precondition_met", t.precondition_met}});
  }
  j["bounds"] = {{"params",
                  {{"num_classes", b.num_classes},
                   {"n", b.n},
                   {"delta", b.delta},
                   {"complexity", b.complexity},
                   {"tau", b.tau},
                   {"input_bound", b.input_bound},
                   {"depth", b.depth}}},
                 {"theorem1", t1},
                 {"theorem2", t2}};

  json curves = json::array();
  for (const auto& c : r.curves) {
    curves.push_back({{"epoch", c.epoch},
                      {"lipschitz", c.lipschitz},
                      {"train_error", c.train_error},
                      {"test_error", optional_json(c.test_error)},
                      {"train_margin_error", c.train_margin_error},
                      {"quantile_margin", c.quantile_margin},
                      {"inverse_quantile", optional_json(c.inverse_quantile)}});
  }
  j["curves"] = curves;

  if (r.heatmap) {
    const auto& h = *r.heatmap;
    j["heatmap"] = {{"method", h.method},
                    {"gamma1", h.gamma1_grid},
                    {"gamma2", h.gamma2_grid},
                    {"rho", matrix_json(h.rho)},
                    {"tau", matrix_json(h.tau)}};
  } else {
    j["heatmap"] = nullptr;
  }
  j["notes"] = r.notes;
  return j.dump(2) + "\n";
}

AnalysisReport report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("report: malformed JSON: ") + e.what());
  }
  if (!j.is_object() || j.value("schema_version", 0) != 1) throw ValidationError("report: unsupported schema_version");
  AnalysisReport r;
  try {
    r.n_epochs = j.at("n_epochs").get<std::size_t>();
    r.q = j.at("q").get<double>();
    r.gamma = j.at("gamma").get<double>();
    r.q_source = j.value("q_source", "");
    r.gamma_source = j.value("gamma_source", "");
    for (const auto& c : j.at("curves")) {
      CurveRow row;
      row.epoch = c.at("epoch").get<std::int64_t>();
      row.lipschitz = c.at("lipschitz").get<double>();
      row.train_error = c.at("train_error").get<double>();
      if (c.at("test_error").is_number()) row.test_error = c["test_error"].get<double>();
      row.train_margin_error = c.at("train_margin_error").get<double>();
      row.quantile_margin = c.at("quantile_margin").get<double>();
      if (c.at("inverse_quantile").is_number()) row.inverse_quantile = c["inverse_quantile"].get<double>();
      r.curves.push_back(row);
    }
    for (const auto& p : j.at("phases")) {
      QuantilePhase qp;
      qp.q = p.at("q").get<double>();
      qp.detection.direction = direction_from_string(p.at("direction").get<std::string>());
      qp.detection.prominence = p.at("prominence").get<double>();
      if (p.at("transition_epoch").is_number()) qp.transition_epoch = p["transition_epoch"].get<std::int64_t>();
      r.phases.push_back(qp);
    }
    if (j.at("heatmap").is_object()) {
      const auto& h = j["heatmap"];
      CorrelationHeatmap hm;
      hm.method = h.value("method", "spearman");
      hm.gamma1_grid = h.at("gamma1").get<std::vector<double>>();
      hm.gamma2_grid = h.at("gamma2").get<std::vector<double>>();
      for (const auto& row : h.at("rho")) {
        std::vector<double> v;
        for (const auto& x : row) v.push_back(number_or_nan(x));
        hm.rho.push_back(std::move(v));
      }
      for (const auto& row : h.at("tau")) {
        std::vector<double> v;
        for (const auto& x : row) v.push_back(number_or_nan(x));
        hm.tau.push_back(std::move(v));
      }
      r.heatmap = std::move(hm);
    }
    for (const auto& n : j.at("notes")) r.notes.push_back(n.get<std::string>());
  } catch (const json::exception& e) {
    throw ValidationError(std::string("report: ") + e.what());
  }
  return r;
}

std::string heatmap_to_csv(const CorrelationHeatmap& h) {
  std::string out = "gamma1\\gamma2";
  for (double g : h.gamma2_grid) out += "," + fmt(g);
  out += '\n';
  for (std::size_t i = 0; i < h.gamma1_grid.size(); ++i) {
    out += fmt(h.gamma1_grid[i]);
    for (double v : h.rho.at(i)) out += "," + fmt(v);
    out += '\n';
  }
  return out;
}

std::string heatmap_color(double value) {
  if (std::isnan(value)) return "#808080";
  const double v = std::clamp(value, -1.0, 1.0);
  int r = 255, g = 255, b = 255;
  const int fade = static_cast<int>(std::lround(255.0 * (1.0 - std::abs(v))));
  if (v > 0) {
    g = b = fade;
  } else if (v < 0) {
    r = g = fade;
  }
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
  return buf;
}

std::string heatmap_to_svg(const CorrelationHeatmap& h) {
  constexpr int cell = 12, margin = 40;
  const auto rows = h.gamma1_grid.size(), cols = h.gamma2_grid.size();
  const auto width = margin + static_cast<int>(cols) * cell + 10;
  const auto height = margin + static_cast<int>(rows) * cell + 10;
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height << "\">\n";
  os << "<text x=\"" << margin << "\" y=\"14\" font-size=\"11\">" << h.method
     << " rank correlation: rows gamma1 (test), cols gamma2 (train)</text>\n";
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t k = 0; k < cols; ++k) {
      const double v = h.rho.at(i).at(k);
      // Row 0 is drawn at the bottom so gamma1 grows upwards.
      os << "<rect x=\"" << margin + static_cast<int>(k) * cell << "\" y=\""
         << margin + static_cast<int>(rows - 1 - i) * cell << "\" width=\"" << cell << "\" height=\"" << cell
         << "\" fill=\"" << heatmap_color(v) << "\" data-row=\"" << i << "\" data-col=\"" << k << "\" data-value=\""
         << fmt(v) << "\"/>\n";
    }
  }
  os << "</svg>\n";
  return os.str();
}

std::string curves_to_csv(const AnalysisReport& r) {
  std::string out =
      "epoch,lipschitz,train_error,test_error,train_margin_error,quantile_margin,inverse_quantile\n";
  const auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  for (const auto& c : r.curves) {
    out += std::to_string(c.epoch) + "," + fmt(c.lipschitz) + "," + fmt(c.train_error) + "," + opt(c.test_error) +
           "," + fmt(c.train_margin_error) + "," + fmt(c.quantile_margin) + "," + opt(c.inverse_quantile) + "\n";
  }
  return out;
}

ReportPaths write_report(const AnalysisReport& report, const fs::path& dir, bool svg) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create report directory '" + dir.string() + "'");
  ReportPaths paths;
  paths.report_json = dir / "report.json";
  paths.curves_csv = dir / "curves.csv";
  write_file_atomic(paths.report_json, report_to_json(report));
  write_file_atomic(paths.curves_csv, curves_to_csv(report));
  if (report.heatmap) {
    paths.heatmap_csv = dir / "heatmap.csv";
    write_file_atomic(*paths.heatmap_csv, heatmap_to_csv(*report.heatmap));
    if (svg) {
      paths.heatmap_svg = dir / "heatmap.svg";
      write_file_atomic(*paths.heatmap_svg, heatmap_to_svg(*report.heatmap));
    }
  }
  return paths;
}

}  // namespace margindyn
