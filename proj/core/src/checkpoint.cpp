#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_map>

#include "json.hpp"

#include "detseg/model.hpp"

using json = nlohmann::json;

namespace detseg::model {

namespace {

constexpr char kMagic[8] = {'D', 'S', 'E', 'G', 'C', 'K', 'P', '1'};

struct TableEntry {
  std::string name;
  std::vector<int> shape;
  uint64_t offset = 0;  // floats from payload start
  uint64_t numel = 0;
};

struct Header {
  json config;
  std::vector<TableEntry> table;
  uint64_t payload_floats = 0;
};

Header read_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string htext(hlen, '\0');
  in.read(htext.data(), static_cast<std::streamsize>(hlen));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);

  Header h;
  json doc = json::parse(htext);
  h.config = doc.at("config");
  uint64_t off = 0;
  for (const auto& t : doc.at("tensors")) {
    TableEntry e;
    e.name = t.at("name").get<std::string>();
    e.shape = t.at("shape").get<std::vector<int>>();
    e.numel = 1;
    for (int d : e.shape) e.numel *= static_cast<uint64_t>(d);
    e.offset = off;
    off += e.numel;
    h.table.push_back(std::move(e));
  }
  h.payload_floats = off;
  return h;
}

}  // namespace

void save_checkpoint(const Model& m, const std::string& path) {
  json table = json::array();
  for (const auto& [name, node] : m.params().items())
    table.push_back({{"name", name}, {"shape", node->value.shape}});
  json doc;
  doc["config"] = json::parse(to_json(m.config()));
  doc["tensors"] = std::move(table);
  const std::string htext = doc.dump();

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out.write(kMagic, 8);
  const uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(htext.data(), static_cast<std::streamsize>(hlen));
  for (const auto& [name, node] : m.params().items())
    out.write(reinterpret_cast<const char*>(node->value.data.data()),
              static_cast<std::streamsize>(node->value.data.size() * sizeof(float)));
  if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

ModelConfig read_checkpoint_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  return model_config_from_json(read_header(in, path).config.dump());
}

void load_checkpoint(Model& m, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  const Header h = read_header(in, path);

  const auto& items = m.params().items();
  if (items.size() != h.table.size())
    throw std::runtime_error("checkpoint parameter table mismatch: model has " +
                             std::to_string(items.size()) + " tensors, file has " +
                             std::to_string(h.table.size()));
  for (size_t i = 0; i < items.size(); ++i) {
    const auto& e = h.table[i];
    if (e.name != items[i].first || e.shape != items[i].second->value.shape)
      throw std::runtime_error("checkpoint tensor mismatch at '" + e.name + "' (model expects '" +
                               items[i].first + "')");
    in.read(reinterpret_cast<char*>(items[i].second->value.data.data()),
            static_cast<std::streamsize>(e.numel * sizeof(float)));
  }
  if (!in) throw std::runtime_error("truncated checkpoint payload: " + path);
}

void load_checkpoint_prefixes(Model& m, const std::string& path,
                              const std::vector<std::string>& prefixes) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  const Header h = read_header(in, path);
  const std::streampos payload_start = in.tellg();

  std::unordered_map<std::string, const TableEntry*> by_name;
  for (const auto& e : h.table) by_name[e.name] = &e;

  for (const auto& [name, node] : m.params().items()) {
    bool wanted = false;
    for (const auto& p : prefixes)
      if (name.rfind(p, 0) == 0) wanted = true;
    if (!wanted) continue;
    auto it = by_name.find(name);
    if (it == by_name.end())
      throw std::runtime_error("checkpoint " + path + " lacks tensor '" + name + "'");
    if (it->second->shape != node->value.shape)
      throw std::runtime_error("checkpoint tensor shape mismatch at '" + name + "'");
    in.seekg(payload_start + static_cast<std::streamoff>(it->second->offset * sizeof(float)));
    in.read(reinterpret_cast<char*>(node->value.data.data()),
            static_cast<std::streamsize>(it->second->numel * sizeof(float)));
    if (!in) throw std::runtime_error("truncated checkpoint payload: " + path);
  }
}

}  // namespace detseg::model
