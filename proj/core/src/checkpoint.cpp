#include "makd/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace makd {

static_assert(std::endian::native == std::endian::little, "payload layout assumes a little-endian host");

namespace container {

static std::string format_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

void write(const std::string& path, const std::string& magic,
           const std::vector<std::pair<std::string, std::string>>& meta, const std::vector<Item>& tensors) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("container: cannot open '" + tmp + "' for writing");
    out << magic << "\n";
    for (const auto& [k, v] : meta) out << k << " " << v << "\n";
    for (const auto& item : tensors) {
      out << "tensor " << item.name << " " << item.tensor.rank();
      for (int i = 0; i < item.tensor.rank(); ++i) out << " " << item.tensor.dim(i);
      out << "\n";
    }
    out << "end_header\n";
    for (const auto& item : tensors) {
      out.write(reinterpret_cast<const char*>(item.tensor.data()),
                static_cast<std::streamsize>(item.tensor.numel()) * 8);
    }
    if (!out) throw std::runtime_error("container: write to '" + tmp + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

// Parses the text header; with want_payload the tensor data is read too.
static File read_impl(const std::string& path, const std::string& magic, bool want_payload) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("container: cannot open '" + path + "'");
  std::string line;
  if (!std::getline(in, line) || line != magic) {
    throw std::runtime_error("container: '" + path + "' does not start with '" + magic + "'");
  }
  File f;
  bool saw_end = false;
  while (std::getline(in, line)) {
    if (line == "end_header") {
      saw_end = true;
      break;
    }
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "tensor") {
      Item item;
      int ndims = 0;
      ls >> item.name >> ndims;
      if (!ls || ndims < 1) throw std::runtime_error("container: bad tensor line '" + line + "'");
      std::vector<int> shape(static_cast<size_t>(ndims));
      for (int& d : shape) ls >> d;
      if (!ls) throw std::runtime_error("container: bad tensor line '" + line + "'");
      item.tensor = Tensor(std::move(shape));
      f.tensors.push_back(std::move(item));
    } else {
      std::string rest;
      std::getline(ls, rest);
      if (!rest.empty() && rest.front() == ' ') rest.erase(rest.begin());
      f.meta.emplace_back(key, rest);
    }
  }
  if (!saw_end) throw std::runtime_error("container: '" + path + "' has no end_header");
  if (want_payload) {
    for (auto& item : f.tensors) {
      in.read(reinterpret_cast<char*>(item.tensor.mut()), static_cast<std::streamsize>(item.tensor.numel()) * 8);
      if (in.gcount() != static_cast<std::streamsize>(item.tensor.numel()) * 8) {
        throw std::runtime_error("container: '" + path + "' truncated in payload of '" + item.name + "'");
      }
    }
  }
  return f;
}

File read(const std::string& path, const std::string& magic) { return read_impl(path, magic, true); }

}  // namespace container

static std::vector<std::pair<std::string, std::string>> config_meta(const ModelConfig& c) {
  std::vector<std::pair<std::string, std::string>> meta;
  meta.emplace_back("kind", kind_to_string(c.kind));
  meta.emplace_back("layers", std::to_string(c.layers));
  meta.emplace_back("hidden", std::to_string(c.hidden));
  meta.emplace_back("ffn", std::to_string(c.ffn));
  meta.emplace_back("heads", std::to_string(c.heads));
  meta.emplace_back("vocab", std::to_string(c.vocab_size));
  meta.emplace_back("max_seq", std::to_string(c.max_seq_len));
  meta.emplace_back("tied_head", c.tied_head ? "1" : "0");
  meta.emplace_back("gelu", c.gelu_kind == GeluKind::Tanh ? "tanh" : "erf");
  meta.emplace_back("ln_eps", container::format_double(c.ln_eps));
  for (const auto& [role, k] : c.rank_map) meta.emplace_back("rank", role + " " + std::to_string(k));
  return meta;
}

static ModelConfig config_from_meta(const std::vector<std::pair<std::string, std::string>>& meta,
                                    const std::string& path) {
  ModelConfig c;
  c.ffn = 0;
  for (const auto& [key, val] : meta) {
    std::istringstream vs(val);
    if (key == "kind") {
      c.kind = kind_from_string(val);
    } else if (key == "layers") {
      vs >> c.layers;
    } else if (key == "hidden") {
      vs >> c.hidden;
    } else if (key == "ffn") {
      vs >> c.ffn;
    } else if (key == "heads") {
      vs >> c.heads;
    } else if (key == "vocab") {
      vs >> c.vocab_size;
    } else if (key == "max_seq") {
      vs >> c.max_seq_len;
    } else if (key == "tied_head") {
      int b = 0;
      vs >> b;
      c.tied_head = b != 0;
    } else if (key == "gelu") {
      if (val != "tanh" && val != "erf") throw std::runtime_error("checkpoint: unknown gelu kind '" + val + "'");
      c.gelu_kind = val == "tanh" ? GeluKind::Tanh : GeluKind::Erf;
    } else if (key == "ln_eps") {
      c.ln_eps = std::stod(val);
    } else if (key == "rank") {
      std::string role;
      int k = 0;
      vs >> role >> k;
      if (role.empty() || k < 1) throw std::runtime_error("checkpoint: bad rank line '" + val + "'");
      c.rank_map[role] = k;
    } else {
      throw std::runtime_error("checkpoint: unknown header key '" + key + "' in '" + path + "'");
    }
  }
  c.finalize();
  return c;
}

void save_checkpoint(const TransformerModel& m, const std::string& path) {
  std::vector<container::Item> items;
  for (const auto& p : parameters(m)) items.push_back({p.name, *p.tensor});
  container::write(path, kModelMagic, config_meta(m.config), items);
}

TransformerModel load_checkpoint(const std::string& path) {
  container::File f = container::read(path, kModelMagic);
  TransformerModel m = build_model_shell(config_from_meta(f.meta, path));
  std::vector<ParamRef> refs = parameters(m);
  if (refs.size() != f.tensors.size()) {
    throw std::runtime_error("checkpoint: '" + path + "' holds " + std::to_string(f.tensors.size()) +
                             " tensors, config implies " + std::to_string(refs.size()));
  }
  for (size_t i = 0; i < refs.size(); ++i) {
    const auto& item = f.tensors[i];
    if (item.name != refs[i].name || !(item.tensor.shape() == refs[i].tensor->shape())) {
      throw std::runtime_error("checkpoint: manifest entry '" + item.name + "' " + item.tensor.shape_str() +
                               " does not match expected '" + refs[i].name + "' " + refs[i].tensor->shape_str());
    }
    *refs[i].tensor = item.tensor;
  }
  return m;
}

CheckpointInfo read_checkpoint_info(const std::string& path) {
  container::File f = container::read_impl(path, kModelMagic, false);
  CheckpointInfo info;
  info.config = config_from_meta(f.meta, path);
  for (const auto& item : f.tensors) {
    info.manifest.push_back({item.name, item.tensor.shape(), item.tensor.numel()});
    info.total_params += item.tensor.numel();
  }
  return info;
}

}  // namespace makd
