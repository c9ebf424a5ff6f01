#pragma once

// "DLT1" container: a magic line followed by named f32 tensor sections and
// string attributes, terminated by "end".
//
//   DLT1
//   section <name>
//   <C> <H> <W>
//   <C*H*W little-endian f32>
//   attr <key> <value>
//   end

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dlsync/error.hpp"
#include "dlsync/io_util.hpp"
#include "dlsync/tensor.hpp"

namespace dlsync {

struct TensorFile {
  std::vector<std::pair<std::string, Tensor3>> sections;
  std::map<std::string, std::string> attributes;

  void add(std::string name, Tensor3 t) {
    if (name.empty() || name.find_first_of(" \n") != std::string::npos)
      throw DomainError("section names must be non-empty and contain no spaces");
    if (has(name)) throw DomainError("duplicate section " + name);
    sections.emplace_back(std::move(name), std::move(t));
  }
  bool has(const std::string& name) const {
    for (const auto& s : sections)
      if (s.first == name) return true;
    return false;
  }
  const Tensor3& get(const std::string& name) const {
    for (const auto& s : sections)
      if (s.first == name) return s.second;
    throw FormatError("tensor file has no section '" + name + "'");
  }
  const std::string& attr(const std::string& key) const {
    const auto it = attributes.find(key);
    if (it == attributes.end()) throw FormatError("tensor file has no attribute '" + key + "'");
    return it->second;
  }
};

inline void write_tensor_file(const TensorFile& file, const std::filesystem::path& path) {
  auto out = io::open_out(path);
  out << "DLT1\n";
  for (const auto& [name, t] : file.sections) {
    out << "section " << name << '\n' << t.channels << ' ' << t.height << ' ' << t.width << '\n';
    for (double v : t.values) io::write_le<float>(out, static_cast<float>(v));
  }
  for (const auto& [key, value] : file.attributes) {
    if (key.find_first_of(" \n") != std::string::npos || value.find('\n') != std::string::npos)
      throw DomainError("attribute keys must not contain spaces or newlines");
    out << "attr " << key << ' ' << value << '\n';
  }
  out << "end\n";
  if (!out) throw FormatError("failed writing " + path.string());
}

inline TensorFile read_tensor_file(const std::filesystem::path& path) {
  auto in = io::open_in(path);
  if (io::read_line(in, "tensor magic") != "DLT1") throw FormatError("bad tensor magic in " + path.string());
  TensorFile file;
  while (true) {
    const auto line = io::read_line(in, "section header or 'end'");
    if (line == "end") break;
    if (line.rfind("section ", 0) == 0) {
      const auto name = line.substr(8);
      const auto dims = io::split(io::read_line(in, "tensor dims"), ' ');
      if (dims.size() != 3) throw FormatError("tensor dims line must be 'C H W'");
      const auto c = io::parse_int(dims[0], "tensor dims"), h = io::parse_int(dims[1], "tensor dims"),
                 w = io::parse_int(dims[2], "tensor dims");
      if (c < 0 || h < 0 || w < 0 || c * h * w > (1ll << 31)) throw FormatError("tensor dims out of range");
      Tensor3 t(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w));
      for (auto& v : t.values) v = io::read_le<float>(in, "tensor payload");
      file.add(name, std::move(t));
    } else if (line.rfind("attr ", 0) == 0) {
      const auto rest = line.substr(5);
      const auto sp = rest.find(' ');
      if (sp == std::string::npos) throw FormatError("attribute line must be 'attr <key> <value>'");
      file.attributes[rest.substr(0, sp)] = rest.substr(sp + 1);
    } else {
      throw FormatError("unexpected line in tensor file: '" + line + "'");
    }
  }
  return file;
}

}  // namespace dlsync
