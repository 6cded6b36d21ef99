// SPDX-License-Identifier: Apache-2.0
#include "sdnia/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "sdnia/errors.hpp"

namespace sdnia {
namespace {

constexpr char kMagic[8] = {'S', 'D', 'N', 'I', 'A', 'C', 'K', 'P'};

std::string dtype_name(torch::Dtype dtype) {
  switch (dtype) {
    case torch::kFloat32: return "float32";
    case torch::kFloat64: return "float64";
    case torch::kInt64: return "int64";
    case torch::kInt32: return "int32";
    case torch::kUInt8: return "uint8";
    case torch::kBool: return "bool";
    default: throw DataError("checkpoint: unsupported tensor dtype");
  }
}

torch::Dtype parse_dtype(const std::string& name) {
  if (name == "float32") return torch::kFloat32;
  if (name == "float64") return torch::kFloat64;
  if (name == "int64") return torch::kInt64;
  if (name == "int32") return torch::kInt32;
  if (name == "uint8") return torch::kUInt8;
  if (name == "bool") return torch::kBool;
  throw DataError("checkpoint: unknown dtype '" + name + "'");
}

template <typename T>
void write_pod(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_pod(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw DataError("checkpoint: truncated file");
  return value;
}

std::string slash_name(const std::string& prefix, const std::string& dotted) {
  return prefix.empty() ? dotted : prefix + "/" + dotted;
}

}  // namespace

std::map<std::string, torch::Tensor> Checkpoint::section(const std::string& prefix) const {
  std::map<std::string, torch::Tensor> out;
  const std::string key = prefix + "/";
  for (const auto& [name, t] : tensors) {
    if (name.rfind(key, 0) == 0) out.emplace(name.substr(key.size()), t);
  }
  return out;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path) {
  nlohmann::json header;
  header["meta"] = checkpoint.meta;
  header["tensors"] = nlohmann::json::array();
  std::vector<torch::Tensor> payload;
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : checkpoint.tensors) {
    auto t = tensor.detach().to(torch::kCPU).contiguous();
    const auto nbytes = static_cast<std::uint64_t>(t.numel() * t.element_size());
    header["tensors"].push_back({{"name", name},
                                 {"dtype", dtype_name(t.scalar_type())},
                                 {"shape", t.sizes().vec()},
                                 {"offset", offset},
                                 {"nbytes", nbytes}});
    offset += nbytes;
    payload.push_back(std::move(t));
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("checkpoint: cannot write " + path.string());
    out.write(kMagic, sizeof(kMagic));
    write_pod<std::uint32_t>(out, Checkpoint::kVersion);
    write_pod<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : payload) {
      out.write(static_cast<const char*>(t.data_ptr()), static_cast<std::streamsize>(t.numel() * t.element_size()));
    }
    if (!out) throw DataError("checkpoint: write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  char magic[sizeof(kMagic)];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw DataError("checkpoint: bad magic in " + path.string());
  const auto version = read_pod<std::uint32_t>(in);
  if (version != Checkpoint::kVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version) + " in " + path.string());
  }
  const auto header_size = read_pod<std::uint64_t>(in);
  std::string text(header_size, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_size));
  if (!in) throw DataError("checkpoint: truncated header in " + path.string());
  const auto header = nlohmann::json::parse(text);
  const auto data_start = static_cast<std::uint64_t>(in.tellg());

  Checkpoint ck;
  ck.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    const auto shape = entry.at("shape").get<std::vector<int64_t>>();
    auto t = torch::empty(shape, torch::TensorOptions().dtype(parse_dtype(entry.at("dtype").get<std::string>())));
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    if (nbytes != static_cast<std::uint64_t>(t.numel() * t.element_size())) {
      throw DataError("checkpoint: size mismatch for " + entry.at("name").get<std::string>());
    }
    in.seekg(static_cast<std::streamoff>(data_start + entry.at("offset").get<std::uint64_t>()));
    in.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
    if (!in) throw DataError("checkpoint: truncated payload in " + path.string());
    ck.tensors.emplace(entry.at("name").get<std::string>(), std::move(t));
  }
  return ck;
}

void export_module(const torch::nn::Module& module, const std::string& prefix, Checkpoint& checkpoint) {
  for (const auto& item : module.named_parameters(/*recurse=*/true)) {
    checkpoint.tensors[slash_name(prefix, item.key())] = item.value().detach().clone();
  }
  for (const auto& item : module.named_buffers(/*recurse=*/true)) {
    checkpoint.tensors[slash_name(prefix, item.key())] = item.value().detach().clone();
  }
}

void import_module(torch::nn::Module& module, const std::string& prefix, const Checkpoint& checkpoint) {
  torch::NoGradGuard no_grad;
  auto copy_into = [&](const std::string& name, torch::Tensor& target) {
    const auto key = slash_name(prefix, name);
    const auto it = checkpoint.tensors.find(key);
    if (it == checkpoint.tensors.end()) throw DataError("checkpoint: missing tensor '" + key + "'");
    if (!it->second.sizes().equals(target.sizes())) {
      std::ostringstream os;
      os << "checkpoint: shape mismatch for '" << key << "': stored " << it->second.sizes() << ", expected "
         << target.sizes();
      throw DataError(os.str());
    }
    target.copy_(it->second);
  };
  for (auto& item : module.named_parameters(true)) copy_into(item.key(), item.value());
  for (auto& item : module.named_buffers(true)) copy_into(item.key(), item.value());
}

}  // namespace sdnia
