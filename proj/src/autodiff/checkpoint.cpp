#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>

#include "handkin/autodiff.hpp"

namespace handkin::ad {

namespace {

constexpr char kMagic[8] = {'H', 'K', 'C', 'K', 'P', 'T', '0', '1'};

void put_u64(std::ostream& os, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  os.write(bytes, 8);
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char bytes[8];
  is.read(reinterpret_cast<char*>(bytes), 8);
  if (!is) throw ValidationError("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& store, const std::string& meta_json) {
  nlohmann::ordered_json header;
  header["names"] = nlohmann::json::array();
  header["shapes"] = nlohmann::json::array();
  header["offsets"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < store.size(); ++i) {
    header["names"].push_back(store.name(i));
    header["shapes"].push_back(store.at(i).shape());
    header["offsets"].push_back(offset);
    offset += store.at(i).size();
  }
  header["meta"] = nlohmann::ordered_json::parse(meta_json);
  const std::string text = header.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw ValidationError("cannot write checkpoint " + path);
    os.write(kMagic, 8);
    put_u64(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const Tensor& t : store.tensors()) {
      for (double v : t.values()) put_u64(os, std::bit_cast<std::uint64_t>(v));
    }
    if (!os) throw ValidationError("failed writing checkpoint " + path);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ValidationError("cannot open checkpoint " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) throw ValidationError(path + " is not a checkpoint file");
  const std::uint64_t len = get_u64(is);
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw ValidationError("checkpoint header truncated");
  const auto header = nlohmann::ordered_json::parse(text);

  Checkpoint ck;
  const auto& names = header.at("names");
  const auto& shapes = header.at("shapes");
  const auto& offsets = header.at("offsets");
  if (names.size() != shapes.size() || names.size() != offsets.size()) {
    throw ValidationError("checkpoint header lists differ in length");
  }
  std::size_t expected_offset = 0;
  for (std::size_t i = 0; i < names.size(); ++i) {
    Shape shape = shapes[i].get<Shape>();
    if (offsets[i].get<std::size_t>() != expected_offset) throw ValidationError("checkpoint offsets are not contiguous");
    std::vector<double> values(numel(shape));
    for (double& v : values) v = std::bit_cast<double>(get_u64(is));
    expected_offset += values.size();
    ck.params.add(names[i].get<std::string>(), Tensor(std::move(shape), std::move(values)));
  }
  ck.meta_json = header.contains("meta") ? header["meta"].dump() : "{}";
  return ck;
}

}  // namespace handkin::ad
