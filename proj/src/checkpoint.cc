//
// Copyright 2026 The dpmaes Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#include "dpmaes/checkpoint.h"

#include <bit>
#include <fstream>
#include <sstream>

#include "dpmaes/errors.h"

namespace dpmaes {
namespace {

constexpr char kMagic[8] = {'D', 'P', 'M', 'A', 'E', 'S', 'C', 'K'};

class Writer {
 public:
  void u32(uint32_t v) { put(v, 4); }
  void u64(uint64_t v) { put(v, 8); }
  void f64(double v) { put(std::bit_cast<uint64_t>(v), 8); }
  void bytes(std::string_view s) { out_.append(s); }
  void str(std::string_view s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s);
  }
  std::string& buffer() { return out_; }

 private:
  void put(uint64_t v, int n) {
    for (int i = 0; i < n; ++i) {
      out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    }
  }
  std::string out_;
};

class Reader {
 public:
  explicit Reader(std::string_view in) : in_(in) {}

  uint32_t u32() { return static_cast<uint32_t>(get(4)); }
  uint64_t u64() { return get(8); }
  double f64() { return std::bit_cast<double>(get(8)); }
  std::string_view bytes(size_t n) {
    need(n);
    std::string_view s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string str() { return std::string(bytes(u32())); }
  size_t pos() const { return pos_; }

 private:
  void need(size_t n) const {
    if (in_.size() - pos_ < n) throw IoError("checkpoint is truncated");
  }
  uint64_t get(int n) {
    need(static_cast<size_t>(n));
    uint64_t v = 0;
    for (int i = 0; i < n; ++i) {
      v |= static_cast<uint64_t>(static_cast<unsigned char>(in_[pos_ + i]))
           << (8 * i);
    }
    pos_ += static_cast<size_t>(n);
    return v;
  }

  std::string_view in_;
  size_t pos_ = 0;
};

}  // namespace

uint64_t fnv1a64(std::string_view bytes, uint64_t state) {
  for (char c : bytes) {
    state ^= static_cast<unsigned char>(c);
    state *= 0x100000001b3ULL;
  }
  return state;
}

std::string encode_checkpoint(const Checkpoint& checkpoint) {
  Writer w;
  w.bytes(std::string_view(kMagic, sizeof(kMagic)));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<uint32_t>(checkpoint.metadata.size()));
  for (const auto& [key, value] : checkpoint.metadata) {
    w.str(key);
    w.str(value);
  }
  const ParameterSet& t = checkpoint.tensors;
  w.u32(static_cast<uint32_t>(t.size()));
  for (size_t i = 0; i < t.size(); ++i) {
    w.str(t.names()[i]);
    const Tensor& v = t.value(i);
    w.u32(static_cast<uint32_t>(v.rank()));
    for (int64_t d : v.shape()) w.u64(static_cast<uint64_t>(d));
    for (double x : v.data()) w.f64(x);
  }
  w.u64(fnv1a64(w.buffer()));
  return std::move(w.buffer());
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  Reader r(bytes);
  if (r.bytes(sizeof(kMagic)) != std::string_view(kMagic, sizeof(kMagic))) {
    throw IoError("not a checkpoint (bad magic)");
  }
  const uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  if (bytes.size() < 8 ||
      fnv1a64(bytes.substr(0, bytes.size() - 8)) !=
          Reader(bytes.substr(bytes.size() - 8)).u64()) {
    throw IoError("checkpoint checksum mismatch");
  }
  Checkpoint out;
  const uint32_t n_meta = r.u32();
  for (uint32_t i = 0; i < n_meta; ++i) {
    std::string key = r.str();
    out.metadata[key] = r.str();
  }
  const uint32_t n_records = r.u32();
  for (uint32_t i = 0; i < n_records; ++i) {
    std::string name = r.str();
    const uint32_t rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int64_t>(r.u64());
    const int64_t n = shape_numel(shape);
    if (n < 0 || static_cast<uint64_t>(n) > bytes.size() / 8) {
      throw IoError("checkpoint record '" + name + "' has a corrupt shape");
    }
    std::vector<double> data(static_cast<size_t>(n));
    for (auto& x : data) x = r.f64();
    out.tensors.add(name, Tensor(std::move(shape), std::move(data)));
  }
  if (r.pos() + 8 != bytes.size()) {
    throw IoError("checkpoint has trailing bytes");
  }
  return out;
}

void write_checkpoint(const std::filesystem::path& path,
                      const Checkpoint& checkpoint) {
  const std::string bytes = encode_checkpoint(checkpoint);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename into " + path.string() + ": " +
                        ec.message());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return decode_checkpoint(buf.str());
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace dpmaes
