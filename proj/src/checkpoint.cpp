#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "flowsense/tensor.hpp"

namespace flowsense::checkpoint {

namespace {

constexpr char kMagic[4] = {'F', 'S', 'T', 'C'};

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are written in native little-endian order");

template <typename U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& in) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!in) throw ConfigError("checkpoint truncated");
  return v;
}

}  // namespace

void write(std::ostream& out, const Container& c) {
  nlohmann::json meta;
  meta["kind"] = c.kind;
  meta["seed"] = c.seed;
  meta["config"] = c.config;
  meta["tensors"] = nlohmann::json::array();
  for (const auto& s : c.tensors.specs()) {
    meta["tensors"].push_back({{"name", s.name}, {"shape", {s.rows, s.cols}}});
  }
  const std::string text = meta.dump();
  out.write(kMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& s : c.tensors.specs()) {
    out.write(reinterpret_cast<const char*>(c.tensors.data().data() + s.offset),
              static_cast<std::streamsize>(s.size() * sizeof(float)));
  }
}

Container read(std::istream& in) {
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0) throw ConfigError("not a flowsense checkpoint");
  const auto version = get<std::uint32_t>(in);
  if (version != kFormatVersion) {
    throw ConfigError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto len = get<std::uint64_t>(in);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw ConfigError("checkpoint truncated");
  const auto meta = nlohmann::json::parse(text);
  Container c;
  c.kind = meta.at("kind").get<std::string>();
  c.seed = meta.at("seed").get<std::uint64_t>();
  c.config = meta.at("config");
  for (const auto& t : meta.at("tensors")) {
    c.tensors.add(t.at("name").get<std::string>(), t.at("shape")[0].get<int>(),
                  t.at("shape")[1].get<int>());
  }
  for (const auto& s : c.tensors.specs()) {
    in.read(reinterpret_cast<char*>(c.tensors.data().data() + s.offset),
            static_cast<std::streamsize>(s.size() * sizeof(float)));
    if (!in) throw ConfigError("checkpoint truncated");
  }
  return c;
}

void write_file(const std::string& path, const Container& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  write(out, c);
}

Container read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  return read(in);
}

}  // namespace flowsense::checkpoint
