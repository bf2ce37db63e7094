#pragma once

// Binary tensor container shared by model and PCA-basis checkpoints:
//
//   bytes 0..7    magic "RNNDYN\0\1"
//   bytes 8..15   header length L, unsigned little-endian
//   next L bytes  JSON header; "tensors" lists {name, rows, cols} in file order
//   remainder     each tensor as rows*cols IEEE-754 doubles, row-major,
//                 little-endian

#include "rnn_dynamo/common.hpp"
#include "rnn_dynamo/recurrent.hpp"

#include "json.hpp"

#include <array>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace rnn_dynamo {

inline constexpr std::array<char, 8> kContainerMagic = {'R', 'N', 'N', 'D', 'Y', 'N', '\0', '\1'};

struct TensorContainer {
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
  std::vector<std::pair<std::string, MatrixXd>> tensors;

  const MatrixXd& at(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return t;
    }
    throw Error("container has no tensor '" + name + "'");
  }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffU));
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string serialize_container(const TensorContainer& c) {
  auto header = c.header;
  header["tensors"] = nlohmann::ordered_json::array();
  for (const auto& [name, t] : c.tensors) {
    header["tensors"].push_back({{"name", name}, {"rows", t.rows()}, {"cols", t.cols()}});
  }
  const std::string text = header.dump();
  std::string out(kContainerMagic.begin(), kContainerMagic.end());
  detail::put_u64(out, text.size());
  out += text;
  for (const auto& [name, t] : c.tensors) {
    for (Eigen::Index i = 0; i < t.rows(); ++i)
      for (Eigen::Index j = 0; j < t.cols(); ++j) detail::put_u64(out, std::bit_cast<std::uint64_t>(t(i, j)));
  }
  return out;
}

inline TensorContainer deserialize_container(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kContainerMagic.data(), 8) != 0) {
    throw Error("not a tensor container (bad magic)");
  }
  const std::uint64_t len = detail::get_u64(bytes.data() + 8);
  if (16 + len > bytes.size()) throw Error("truncated container header");
  TensorContainer c;
  try {
    c.header = nlohmann::ordered_json::parse(bytes.substr(16, len));
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("corrupt container header: ") + e.what());
  }
  std::size_t pos = 16 + len;
  for (const auto& entry : c.header.at("tensors")) {
    const auto rows = entry.at("rows").get<Eigen::Index>();
    const auto cols = entry.at("cols").get<Eigen::Index>();
    if (rows < 0 || cols < 0) throw Error("negative tensor shape");
    const auto count = static_cast<std::size_t>(rows * cols);
    if (pos + 8 * count > bytes.size()) throw Error("truncated tensor '" + entry.at("name").get<std::string>() + "'");
    MatrixXd t(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) {
        t(i, j) = std::bit_cast<double>(detail::get_u64(bytes.data() + pos));
        pos += 8;
      }
    c.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
  }
  if (pos != bytes.size()) throw Error("trailing bytes after last tensor");
  c.header.erase("tensors");
  return c;
}

inline void write_container(const std::string& path, const TensorContainer& c) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path + "'");
  const auto bytes = serialize_container(c);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path + "'");
}

inline TensorContainer read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_container(bytes);
}

inline nlohmann::ordered_json arch_to_json(const ArchSpec& a) {
  return {{"cell_type", std::string(cell_name(a.cell))},
          {"embed_dim", a.embed_dim},
          {"hidden_dim", a.hidden_dim},
          {"n_classes", a.n_classes},
          {"vocab_size", a.vocab_size}};
}

inline ArchSpec arch_from_json(const nlohmann::ordered_json& j) {
  ArchSpec a;
  a.cell = parse_cell(j.at("cell_type").get<std::string>());
  a.embed_dim = j.at("embed_dim").get<int>();
  a.hidden_dim = j.at("hidden_dim").get<int>();
  a.n_classes = j.at("n_classes").get<int>();
  a.vocab_size = j.at("vocab_size").get<int>();
  a.validate();
  return a;
}

struct ModelCheckpoint {
  ModelParams params;
  std::uint64_t seed = 0;
  std::uint64_t vocab_hash = 0;
};

inline TensorContainer to_container(const ModelCheckpoint& ck) {
  TensorContainer c;
  c.header["kind"] = "model";
  c.header["arch"] = arch_to_json(ck.params.arch);
  c.header["seed"] = ck.seed;
  c.header["vocab_hash"] = hex64(ck.vocab_hash);
  ck.params.for_each_tensor([&](std::string_view name, const auto& t) {
    c.tensors.emplace_back(std::string(name), MatrixXd(t));
  });
  return c;
}

inline ModelCheckpoint model_from_container(const TensorContainer& c) {
  if (c.header.value("kind", "") != "model") throw Error("container is not a model checkpoint");
  ModelCheckpoint ck;
  ck.params = ModelParams::zeros(arch_from_json(c.header.at("arch")));
  ck.seed = c.header.at("seed").get<std::uint64_t>();
  ck.vocab_hash = std::stoull(c.header.at("vocab_hash").get<std::string>(), nullptr, 16);
  ck.params.for_each_tensor([&](std::string_view name, auto& t) {
    const MatrixXd& src = c.at(std::string(name));
    if (src.rows() != t.rows() || src.cols() != t.cols()) {
      throw Error("tensor '" + std::string(name) + "' has the wrong shape");
    }
    t = src;
  });
  ck.params.check_shapes();
  return ck;
}

inline void save_model(const std::string& path, const ModelCheckpoint& ck) {
  write_container(path, to_container(ck));
}

inline ModelCheckpoint load_model(const std::string& path) {
  return model_from_container(read_container(path));
}

}  // namespace rnn_dynamo
