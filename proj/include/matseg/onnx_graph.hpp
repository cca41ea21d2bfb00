#pragma once

// Reads the input/output signature of a serialized ONNX model without a full
// protobuf runtime: only the fields needed to check tensor names and shapes.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "matseg/backend.hpp"

namespace matseg::onnx {

struct TensorInfo {
  std::string name;
  int elem_type = 0;                         // onnx TensorProto.DataType
  std::vector<std::optional<std::int64_t>> dims;  // nullopt = symbolic
};

struct GraphSignature {
  std::vector<TensorInfo> inputs;   // initializers excluded
  std::vector<TensorInfo> outputs;
  std::map<std::string, std::string> metadata;

  const TensorInfo* input(std::string_view name) const {
    for (const auto& t : inputs)
      if (t.name == name) return &t;
    return nullptr;
  }
  const TensorInfo* output(std::string_view name) const {
    for (const auto& t : outputs)
      if (t.name == name) return &t;
    return nullptr;
  }
};

namespace wire {

class Reader {
 public:
  Reader(const std::uint8_t* p, std::size_t n) : p_(p), end_(p + n) {}

  bool done() const { return p_ >= end_; }

  std::uint64_t varint() {
    std::uint64_t v = 0;
    for (int shift = 0; shift < 64; shift += 7) {
      if (p_ >= end_) throw BackendError("onnx: truncated varint");
      const std::uint8_t b = *p_++;
      v |= std::uint64_t{b & 0x7fu} << shift;
      if (!(b & 0x80)) return v;
    }
    throw BackendError("onnx: malformed varint");
  }

  /// Next field key: (field number, wire type).
  std::pair<std::uint32_t, int> key() {
    const auto k = varint();
    return {static_cast<std::uint32_t>(k >> 3), static_cast<int>(k & 7)};
  }

  Reader bytes() {
    const auto n = varint();
    if (n > static_cast<std::uint64_t>(end_ - p_)) throw BackendError("onnx: truncated field");
    Reader sub(p_, static_cast<std::size_t>(n));
    p_ += n;
    return sub;
  }

  std::string string() {
    Reader r = bytes();
    return std::string(reinterpret_cast<const char*>(r.p_), static_cast<std::size_t>(r.end_ - r.p_));
  }

  void skip(int wire_type) {
    switch (wire_type) {
      case 0: varint(); break;
      case 1: advance(8); break;
      case 2: bytes(); break;
      case 5: advance(4); break;
      default: throw BackendError("onnx: unsupported wire type " + std::to_string(wire_type));
    }
  }

 private:
  void advance(std::size_t n) {
    if (n > static_cast<std::size_t>(end_ - p_)) throw BackendError("onnx: truncated field");
    p_ += n;
  }

  const std::uint8_t* p_;
  const std::uint8_t* end_;
};

// TensorShapeProto.Dimension
inline std::optional<std::int64_t> parse_dim(Reader r) {
  std::optional<std::int64_t> v;
  while (!r.done()) {
    auto [f, t] = r.key();
    if (f == 1 && t == 0)
      v = static_cast<std::int64_t>(r.varint());
    else
      r.skip(t);
  }
  return v;
}

// ValueInfoProto -> TypeProto -> TypeProto.Tensor -> TensorShapeProto
inline TensorInfo parse_value_info(Reader r) {
  TensorInfo info;
  while (!r.done()) {
    auto [f, t] = r.key();
    if (f == 1 && t == 2) {
      info.name = r.string();
    } else if (f == 2 && t == 2) {
      Reader type = r.bytes();
      while (!type.done()) {
        auto [tf, tt] = type.key();
        if (tf != 1 || tt != 2) {
          type.skip(tt);
          continue;
        }
        Reader tensor = type.bytes();
        while (!tensor.done()) {
          auto [xf, xt] = tensor.key();
          if (xf == 1 && xt == 0) {
            info.elem_type = static_cast<int>(tensor.varint());
          } else if (xf == 2 && xt == 2) {
            Reader shape = tensor.bytes();
            while (!shape.done()) {
              auto [sf, st] = shape.key();
              if (sf == 1 && st == 2)
                info.dims.push_back(parse_dim(shape.bytes()));
              else
                shape.skip(st);
            }
          } else {
            tensor.skip(xt);
          }
        }
      }
    } else {
      r.skip(t);
    }
  }
  return info;
}

// TensorProto: only the name (field 8) matters here.
inline std::string initializer_name(Reader r) {
  std::string name;
  while (!r.done()) {
    auto [f, t] = r.key();
    if (f == 8 && t == 2)
      name = r.string();
    else
      r.skip(t);
  }
  return name;
}

}  // namespace wire

/// Parses ModelProto.graph inputs/outputs and metadata_props.
inline GraphSignature parse_signature(const std::uint8_t* data, std::size_t size) {
  GraphSignature sig;
  std::set<std::string> initializers;
  std::vector<TensorInfo> raw_inputs;
  bool have_graph = false;
  wire::Reader model(data, size);
  while (!model.done()) {
    auto [f, t] = model.key();
    if (f == 7 && t == 2) {
      have_graph = true;
      wire::Reader graph = model.bytes();
      while (!graph.done()) {
        auto [gf, gt] = graph.key();
        if (gf == 11 && gt == 2)
          raw_inputs.push_back(wire::parse_value_info(graph.bytes()));
        else if (gf == 12 && gt == 2)
          sig.outputs.push_back(wire::parse_value_info(graph.bytes()));
        else if (gf == 5 && gt == 2)
          initializers.insert(wire::initializer_name(graph.bytes()));
        else
          graph.skip(gt);
      }
    } else if (f == 14 && t == 2) {
      wire::Reader entry = model.bytes();
      std::string k, v;
      while (!entry.done()) {
        auto [ef, et] = entry.key();
        if (ef == 1 && et == 2)
          k = entry.string();
        else if (ef == 2 && et == 2)
          v = entry.string();
        else
          entry.skip(et);
      }
      sig.metadata[k] = v;
    } else {
      model.skip(t);
    }
  }
  if (!have_graph) throw BackendError("onnx: no graph in model");
  for (auto& in : raw_inputs)
    if (!initializers.count(in.name)) sig.inputs.push_back(std::move(in));
  return sig;
}

inline GraphSignature read_signature(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw BackendError("cannot open model file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  try {
    return parse_signature(bytes.data(), bytes.size());
  } catch (const BackendError& e) {
    throw BackendError(path.string() + ": " + e.what());
  }
}

}  // namespace matseg::onnx
