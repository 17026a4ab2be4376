#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <nlohmann/json.hpp>

#include "falldet/model.hpp"

namespace falldet {

namespace {

namespace it = boost::archive::iterators;
using Encoder = it::base64_from_binary<it::transform_width<const char*, 6, 8>>;
using Decoder = it::transform_width<it::binary_from_base64<const char*>, 8, 6>;

std::uint64_t to_little(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t r = 0;
    for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return r;
  }
  return v;
}

nlohmann::json store_to_json(const ParamStore& store) {
  auto arr = nlohmann::json::array();
  for (const auto& [name, t] : store) {
    arr.push_back({{"name", name}, {"shape", t.shape()}, {"data", encode_doubles(t.data())}});
  }
  return arr;
}

void store_from_json(ParamStore& store, const nlohmann::json& arr, const std::string& what) {
  if (arr.size() != store.size()) {
    throw std::runtime_error("checkpoint " + what + ": expected " + std::to_string(store.size()) + " arrays, found " +
                             std::to_string(arr.size()));
  }
  std::size_t i = 0;
  for (auto& [name, t] : store) {
    const auto& entry = arr.at(i++);
    if (entry.at("name").get<std::string>() != name) {
      throw std::runtime_error("checkpoint " + what + ": expected " + name + ", found " +
                               entry.at("name").get<std::string>());
    }
    if (entry.at("shape").get<Shape>() != t.shape()) {
      throw std::runtime_error("checkpoint " + what + ": shape mismatch for " + name);
    }
    auto values = decode_doubles(entry.at("data").get<std::string>());
    if (values.size() != t.size()) throw std::runtime_error("checkpoint " + what + ": length mismatch for " + name);
    std::copy(values.begin(), values.end(), t.mutable_data().begin());
  }
}

}  // namespace

std::string encode_doubles(std::span<const double> values) {
  std::string bytes(values.size() * 8, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    const std::uint64_t v = to_little(std::bit_cast<std::uint64_t>(values[i]));
    std::memcpy(bytes.data() + 8 * i, &v, 8);
  }
  std::string out(Encoder(bytes.data()), Encoder(bytes.data() + bytes.size()));
  out.append((4 - out.size() % 4) % 4, '=');
  return out;
}

std::vector<double> decode_doubles(std::string_view text) {
  if (text.size() % 4 != 0) throw std::runtime_error("base64 payload length is not a multiple of 4");
  std::string padded(text);
  const std::size_t pad = padded.empty() ? 0 : std::count(padded.end() - std::min<std::size_t>(2, padded.size()), padded.end(), '=');
  std::replace(padded.end() - pad, padded.end(), '=', 'A');
  std::string bytes(Decoder(padded.data()), Decoder(padded.data() + padded.size()));
  bytes.resize(bytes.size() - pad);
  if (bytes.size() % 8 != 0) throw std::runtime_error("base64 payload is not a whole number of doubles");
  std::vector<double> out(bytes.size() / 8);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t v = 0;
    std::memcpy(&v, bytes.data() + 8 * i, 8);
    out[i] = std::bit_cast<double>(to_little(v));
  }
  return out;
}

void save_checkpoint(const Model& model, const std::string& path) {
  nlohmann::json doc{{"format", "falldet-checkpoint"},
                     {"version", 1},
                     {"spec", spec_to_json(model.spec())},
                     {"seed", model.seed()},
                     {"params", store_to_json(model.params())},
                     {"buffers", store_to_json(model.buffers())}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out << doc.dump(1) << '\n';
  if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
    if (doc.value("format", "") != "falldet-checkpoint") throw std::runtime_error("not a falldet checkpoint: " + path);
    const auto spec = spec_from_json(doc.at("spec"));
    Model model = Model::build(spec, doc.at("seed").get<std::uint64_t>());
    store_from_json(model.params_, doc.at("params"), "params");
    store_from_json(model.buffers_, doc.at("buffers"), "buffers");
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint " + path + ": " + e.what());
  }
}

}  // namespace falldet
