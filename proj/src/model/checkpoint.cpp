// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "spell/model.hpp"

namespace spell {

namespace {

constexpr std::size_t kMagicLength = sizeof(kCheckpointMagic) - 1;

struct Record {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;
};

void put_u32(std::ostream& out, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v & 0xff),
                         static_cast<char>((v >> 8) & 0xff),
                         static_cast<char>((v >> 16) & 0xff),
                         static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

void write_record(std::ostream& out, const std::string& name,
                  const std::vector<std::uint32_t>& dims,
                  std::span<const float> values) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_u32(out, static_cast<std::uint32_t>(dims.size()));
  for (std::uint32_t d : dims) put_u32(out, d);
  for (float v : values) put_u32(out, std::bit_cast<std::uint32_t>(v));
}

class Reader {
 public:
  Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) fail(ErrorKind::kIo, "cannot open checkpoint " + path.string());
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

  void bytes(char* dst, std::size_t n, const char* field) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      fail(ErrorKind::kFormat, path_.string() + ": truncated at offset " +
                                   std::to_string(offset_) + " reading " +
                                   field);
    }
    offset_ += n;
  }

  std::uint32_t u32(const char* field) {
    unsigned char b[4];
    bytes(reinterpret_cast<char*>(b), 4, field);
    return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) |
           (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
  }

  std::size_t offset() const noexcept { return offset_; }
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::size_t offset_ = 0;
};

std::map<std::string, Record> read_records(const std::filesystem::path& path) {
  Reader r(path);
  char magic[kMagicLength];
  r.bytes(magic, kMagicLength, "magic");
  if (std::memcmp(magic, kCheckpointMagic, kMagicLength) != 0) {
    fail(ErrorKind::kFormat, path.string() + ": bad magic, not a checkpoint");
  }
  std::map<std::string, Record> records;
  std::string previous;
  while (!r.at_end()) {
    const std::size_t start = r.offset();
    const std::uint32_t name_len = r.u32("name length");
    if (name_len == 0 || name_len > 4096) {
      fail(ErrorKind::kFormat, path.string() + ": implausible name length " +
                                   std::to_string(name_len) + " at offset " +
                                   std::to_string(start));
    }
    std::string name(name_len, '\0');
    r.bytes(name.data(), name_len, "name");
    if (!previous.empty() && name <= previous) {
      fail(ErrorKind::kFormat, path.string() + ": tensor '" + name +
                                   "' out of sorted order at offset " +
                                   std::to_string(start));
    }
    previous = name;
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 4) {
      fail(ErrorKind::kFormat, path.string() + ": tensor '" + name +
                                   "' has unsupported rank " +
                                   std::to_string(rank));
    }
    Record rec;
    std::size_t count = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      rec.dims.push_back(r.u32("dims"));
      count *= rec.dims.back();
    }
    if (count > (std::size_t{1} << 28)) {
      fail(ErrorKind::kFormat,
           path.string() + ": tensor '" + name + "' is implausibly large");
    }
    rec.values.resize(count);
    for (float& v : rec.values) v = std::bit_cast<float>(r.u32("data"));
    records.emplace(std::move(name), std::move(rec));
  }
  return records;
}

const Record& require(const std::map<std::string, Record>& records,
                      const std::string& name) {
  auto it = records.find(name);
  if (it == records.end()) {
    fail(ErrorKind::kFormat, "checkpoint lacks tensor '" + name + "'");
  }
  return it->second;
}

}  // namespace

template <typename T>
void save_checkpoint(SpellModel<T>& model, const std::filesystem::path& path) {
  struct Item {
    std::string name;
    std::vector<std::uint32_t> dims;
    std::vector<float> values;
  };
  std::vector<Item> items;
  for (const ParamTensor<T>* p : model.parameters()) {
    Item it{p->name,
            {static_cast<std::uint32_t>(p->value.rows()),
             static_cast<std::uint32_t>(p->value.cols())},
            {}};
    for (T v : p->value.data()) it.values.push_back(static_cast<float>(v));
    items.push_back(std::move(it));
  }
  for (const Buffer<T>& b : model.buffers()) {
    Item it{b.name, {static_cast<std::uint32_t>(b.values->size())}, {}};
    for (T v : *b.values) it.values.push_back(static_cast<float>(v));
    items.push_back(std::move(it));
  }
  std::sort(items.begin(), items.end(),
            [](const Item& a, const Item& b) { return a.name < b.name; });

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, kMagicLength);
  for (const Item& it : items) write_record(out, it.name, it.dims, it.values);
  out.flush();
  if (!out) fail(ErrorKind::kIo, "failed writing checkpoint " + path.string());
}

ModelConfig read_checkpoint_config(const std::filesystem::path& path) {
  const auto records = read_records(path);
  const auto has = [&](const std::string& n) { return records.count(n) > 0; };
  const auto rows = [&](const std::string& n) -> std::size_t {
    const Record& r = require(records, n);
    if (r.dims.size() != 2) {
      fail(ErrorKind::kFormat, "checkpoint tensor '" + n + "' must be rank 2");
    }
    return r.dims[0];
  };
  const auto cols = [&](const std::string& n) -> std::size_t {
    rows(n);
    return require(records, n).dims[1];
  };

  ModelConfig c;
  c.filter_dim = cols("audio_fuse.weight");
  c.audio_dim = rows("audio_fuse.weight");
  c.use_spatial = has("spatial_proj.weight");
  std::size_t visual_in = rows("visual_fuse.weight");
  if (c.use_spatial) {
    c.spatial_dim = rows("spatial_proj.weight");
    c.spatial_proj_dim = cols("spatial_proj.weight");
    if (visual_in <= c.spatial_proj_dim) {
      fail(ErrorKind::kFormat, "checkpoint visual fusion width is inconsistent");
    }
    visual_in -= c.spatial_proj_dim;
  }
  c.visual_dim = visual_in;
  c.use_graph = !has("node_head.weight");
  if (c.use_graph) {
    c.bidirectional = has("sage3.forward.weight");
    c.inception_layer2 = has("inception.proj.weight");
    const std::size_t hidden = cols("edge_conv.undirected.lin1.weight");
    c.edge_mlp_hidden = hidden == c.filter_dim ? 0 : hidden;
  }
  return c;
}

template <typename T>
void load_checkpoint(SpellModel<T>& model, const std::filesystem::path& path) {
  const auto records = read_records(path);
  std::size_t expected = 0;
  for (ParamTensor<T>* p : model.parameters()) {
    ++expected;
    const Record& r = require(records, p->name);
    if (r.dims.size() != 2 || r.dims[0] != p->value.rows() ||
        r.dims[1] != p->value.cols()) {
      fail(ErrorKind::kFormat, "checkpoint tensor '" + p->name +
                                   "' has the wrong shape for " +
                                   p->value.shape());
    }
    for (std::size_t i = 0; i < r.values.size(); ++i) {
      p->value.data()[i] = static_cast<T>(r.values[i]);
    }
    p->zero_grad();
  }
  for (const Buffer<T>& b : model.buffers()) {
    ++expected;
    const Record& r = require(records, b.name);
    if (r.dims.size() != 1 || r.dims[0] != b.values->size()) {
      fail(ErrorKind::kFormat,
           "checkpoint buffer '" + b.name + "' has the wrong shape");
    }
    for (std::size_t i = 0; i < r.values.size(); ++i) {
      (*b.values)[i] = static_cast<T>(r.values[i]);
    }
  }
  if (records.size() != expected) {
    fail(ErrorKind::kFormat, path.string() + ": holds " +
                                 std::to_string(records.size()) +
                                 " tensors, model expects " +
                                 std::to_string(expected));
  }
}

template void save_checkpoint(SpellModel<float>&, const std::filesystem::path&);
template void save_checkpoint(SpellModel<double>&, const std::filesystem::path&);
template void load_checkpoint(SpellModel<float>&, const std::filesystem::path&);
template void load_checkpoint(SpellModel<double>&, const std::filesystem::path&);

}  // namespace spell
