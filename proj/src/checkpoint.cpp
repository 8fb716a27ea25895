#include "iapo/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "iapo/error.hpp"

namespace iapo {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'I', 'A', 'P', 'O'};

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

template <class T>
void put(std::string& out, const T& v) {
  const char* p = reinterpret_cast<const char*>(&v);
  out.append(p, sizeof(T));
}

void put_doubles(std::string& out, std::span<const double> v) {
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <class T>
  T get() {
    T v;
    take(&v, sizeof(T));
    return v;
  }
  void get_doubles(std::span<double> out) { take(out.data(), out.size() * sizeof(double)); }
  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ || pos_ > end_ - n) throw IntegrityError("checkpoint is truncated");
  }
  void take(void* dst, std::size_t n) {
    need(n);
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }

  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Params& params,
                     const AdamWState* optimizer, const nlohmann::json& meta) {
  nlohmann::json header;
  header["model"] = params.config();
  header["meta"] = meta;
  if (optimizer) {
    const auto& h = optimizer->hyper;
    header["optimizer"] = {{"lr", h.lr},       {"beta1", h.beta1},
                           {"beta2", h.beta2}, {"eps", h.eps},
                           {"weight_decay", h.weight_decay},
                           {"step", optimizer->step},
                           {"lr_scale", optimizer->lr_scale}};
  }
  const std::string header_text = header.dump();

  std::string out;
  out.append(kMagic, 4);
  put(out, kCheckpointVersion);
  put(out, static_cast<std::uint64_t>(header_text.size()));
  out += header_text;
  put(out, static_cast<std::uint64_t>(params.size()));
  put_doubles(out, params.values());
  put(out, static_cast<std::uint8_t>(optimizer ? 1 : 0));
  if (optimizer) {
    put_doubles(out, optimizer->m);
    put_doubles(out, optimizer->v);
  }
  put(out, fnv1a(out));

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write checkpoint " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw IoError("write failed for checkpoint " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw IntegrityError(path.string() + ": not a checkpoint (bad magic)");
  }
  if (bytes.size() < 4 + sizeof(std::uint32_t) + sizeof(std::uint64_t)) {
    throw IntegrityError(path.string() + ": checkpoint is truncated");
  }
  Reader r(bytes, bytes.size() - sizeof(std::uint64_t));
  r.get_string(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IncompatibleError(path.string() + ": checkpoint format version " + std::to_string(version) +
                            ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto header_len = r.get<std::uint64_t>();
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(r.get_string(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(path.string() + ": corrupt checkpoint header: " + e.what());
  }
  ModelConfig config;
  try {
    config = header.at("model").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError(path.string() + ": checkpoint header lacks a model config");
  }
  if (expected && !(config == *expected)) {
    throw IncompatibleError(path.string() + ": checkpoint model config " +
                            nlohmann::json(config).dump() + " does not match expected " +
                            nlohmann::json(*expected).dump());
  }
  if (config.vocab_size != tok::kVocabSize && expected == nullptr) {
    // Non-standard vocabularies are only loadable with an explicit expectation.
    throw IncompatibleError(path.string() + ": checkpoint vocab_size " +
                            std::to_string(config.vocab_size) + " differs from the standard " +
                            std::to_string(tok::kVocabSize));
  }
  Checkpoint ck{Params(config), std::nullopt, header.value("meta", nlohmann::json{})};
  const auto count = r.get<std::uint64_t>();
  if (count != ck.params.size()) {
    throw IntegrityError(path.string() + ": weight count does not match the config");
  }
  r.get_doubles(ck.params.values());
  if (r.get<std::uint8_t>() != 0) {
    const auto& o = header.at("optimizer");
    AdamWHyper h{o.at("lr").get<double>(), o.at("beta1").get<double>(), o.at("beta2").get<double>(),
                 o.at("eps").get<double>(), o.at("weight_decay").get<double>()};
    AdamWState s = AdamWState::for_params(ck.params, h);
    s.step = o.at("step").get<std::uint64_t>();
    s.lr_scale = o.at("lr_scale").get<double>();
    r.get_doubles(s.m);
    r.get_doubles(s.v);
    ck.optimizer = std::move(s);
  }
  if (r.position() != bytes.size() - sizeof(std::uint64_t)) {
    throw IntegrityError(path.string() + ": trailing bytes in checkpoint");
  }
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + r.position(), sizeof(stored));
  if (stored != fnv1a(bytes.substr(0, r.position()))) {
    throw IntegrityError(path.string() + ": checksum mismatch");
  }
  return ck;
}

}  // namespace iapo
