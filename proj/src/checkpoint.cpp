#include "kfep/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "kfep/error.hpp"

namespace kfep::checkpoint {

namespace {

constexpr char kMagic[4] = {'K', 'F', 'E', 'P'};

class Writer {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double d) {
    const auto v = std::bit_cast<std::uint64_t>(d);
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void name(const std::string& s) {
    if (s.size() > 255) throw ValidationError("checkpoint: name too long");
    u8(static_cast<std::uint8_t>(s.size()));
    out_.insert(out_.end(), s.begin(), s.end());
  }
  void raw(const char* p, std::size_t n) { out_.insert(out_.end(), p, p + n); }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw FormatError("checkpoint: truncated at byte " + std::to_string(pos_));
  }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_++]} << (8 * i);
    return v;
  }
  double f64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{b_[pos_++]} << (8 * i);
    return std::bit_cast<double>(v);
  }
  std::string name() {
    const std::size_t n = u8();
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

Tensor make_tensor(std::string name, const Matrix& m) {
  return {std::move(name), {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())},
          {m.data().begin(), m.data().end()}};
}

Tensor make_tensor(std::string name, const Vector& v) {
  return {std::move(name), {static_cast<std::uint32_t>(v.size())}, v};
}

Matrix to_matrix(const Tensor& t) {
  if (t.dims.size() != 2) throw FormatError("checkpoint: tensor '" + t.name + "' is not 2-D");
  return Matrix(t.dims[0], t.dims[1], t.data);
}

Vector to_vector(const Tensor& t) {
  if (t.dims.size() != 1) throw FormatError("checkpoint: tensor '" + t.name + "' is not 1-D");
  return t.data;
}

std::uint32_t attr(const Record& r, std::size_t i) {
  if (i >= r.attrs.size()) throw FormatError("checkpoint: record is missing attributes");
  return r.attrs[i];
}

}  // namespace

const Tensor& Record::tensor(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw FormatError("checkpoint: record of layer " + std::to_string(layer_index) + " has no tensor '" + name + "'");
}

const IndexList& Record::list(const std::string& name) const {
  for (const auto& l : lists)
    if (l.name == name) return l;
  throw FormatError("checkpoint: record of layer " + std::to_string(layer_index) + " has no list '" + name + "'");
}

std::vector<std::uint8_t> encode(std::span<const Record> records) {
  Writer w;
  w.raw(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const Record& r : records) {
    w.u8(static_cast<std::uint8_t>(r.tag));
    w.u32(r.layer_index);
    w.u32(static_cast<std::uint32_t>(r.attrs.size()));
    for (std::uint32_t a : r.attrs) w.u32(a);
    w.u32(static_cast<std::uint32_t>(r.tensors.size()));
    for (const Tensor& t : r.tensors) {
      std::size_t n = 1;
      for (std::uint32_t d : t.dims) n *= d;
      if (n != t.data.size()) throw ValidationError("checkpoint: tensor '" + t.name + "' size does not match dims");
      w.name(t.name);
      w.u32(static_cast<std::uint32_t>(t.dims.size()));
      for (std::uint32_t d : t.dims) w.u32(d);
      for (double x : t.data) w.f64(x);
    }
    w.u32(static_cast<std::uint32_t>(r.lists.size()));
    for (const IndexList& l : r.lists) {
      w.name(l.name);
      w.u32(static_cast<std::uint32_t>(l.data.size()));
      for (std::uint32_t x : l.data) w.u32(x);
    }
  }
  return w.take();
}

std::vector<Record> decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("checkpoint: bad magic");
  Reader rd(bytes.subspan(4));
  const std::uint32_t version = rd.u32();
  if (version != kVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  const std::uint32_t count = rd.u32();
  std::vector<Record> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    Record r;
    r.tag = static_cast<Tag>(rd.u8());
    r.layer_index = rd.u32();
    r.attrs.resize(rd.u32());
    for (auto& a : r.attrs) a = rd.u32();
    const std::uint32_t nt = rd.u32();
    for (std::uint32_t t = 0; t < nt; ++t) {
      Tensor tn;
      tn.name = rd.name();
      tn.dims.resize(rd.u32());
      std::size_t n = 1;
      for (auto& d : tn.dims) {
        d = rd.u32();
        n *= d;
      }
      rd.need(n * 8);
      tn.data.resize(n);
      for (double& x : tn.data) x = rd.f64();
      r.tensors.push_back(std::move(tn));
    }
    const std::uint32_t nl = rd.u32();
    for (std::uint32_t l = 0; l < nl; ++l) {
      IndexList il;
      il.name = rd.name();
      const std::uint32_t len = rd.u32();
      rd.need(std::size_t{len} * 4);
      il.data.resize(len);
      for (auto& x : il.data) x = rd.u32();
      r.lists.push_back(std::move(il));
    }
    out.push_back(std::move(r));
  }
  if (!rd.done()) throw FormatError("checkpoint: trailing bytes after last record");
  return out;
}

std::vector<Record> network_records(const nn::Network& net) {
  std::vector<Record> out;
  out.push_back({Tag::input, 0, {static_cast<std::uint32_t>(net.input.c), static_cast<std::uint32_t>(net.input.h),
                                 static_cast<std::uint32_t>(net.input.w)}, {}, {}});
  for (std::size_t li = 0; li < net.layers.size(); ++li) {
    Record r;
    r.layer_index = static_cast<std::uint32_t>(li);
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, nn::DenseLayer>) {
            r.tag = Tag::dense;
            r.tensors = {make_tensor("W", l.weight), make_tensor("b", l.bias)};
          } else if constexpr (std::is_same_v<T, nn::ConvLayer>) {
            r.tag = Tag::conv;
            r.attrs = {static_cast<std::uint32_t>(l.c_in), static_cast<std::uint32_t>(l.c_out),
                       static_cast<std::uint32_t>(l.k), static_cast<std::uint32_t>(l.stride),
                       static_cast<std::uint32_t>(l.padding)};
            r.tensors = {make_tensor("W", l.weight), make_tensor("b", l.bias)};
          } else if constexpr (std::is_same_v<T, nn::ReluLayer>) {
            r.tag = Tag::relu;
          } else if constexpr (std::is_same_v<T, nn::FlattenLayer>) {
            r.tag = Tag::flatten;
          } else if constexpr (std::is_same_v<T, nn::GlobalAvgPoolLayer>) {
            r.tag = Tag::global_avg_pool;
          } else {
            r.tag = Tag::bottleneck;
            r.attrs = {static_cast<std::uint32_t>(l.kind), static_cast<std::uint32_t>(l.variant),
                       static_cast<std::uint32_t>(l.c_in), static_cast<std::uint32_t>(l.c_out),
                       static_cast<std::uint32_t>(l.k), static_cast<std::uint32_t>(l.stride),
                       static_cast<std::uint32_t>(l.padding)};
            r.tensors = {make_tensor("QA", l.q_a), l.is_depthwise() ? make_tensor("D", l.depthwise) : make_tensor("Wp", l.core),
                         make_tensor("QS", l.q_s), make_tensor("b", l.bias)};
            r.lists = {{"kept_rows", l.kept_rows}, {"kept_cols", l.kept_cols}};
          }
        },
        net.layers[li]);
    out.push_back(std::move(r));
  }
  return out;
}

nn::Network network_from_records(std::span<const Record> records) {
  if (records.empty() || records[0].tag != Tag::input) throw FormatError("checkpoint: missing input header record");
  nn::Network net;
  net.input = nn::Shape{attr(records[0], 0), attr(records[0], 1), attr(records[0], 2)};
  for (std::size_t i = 1; i < records.size(); ++i) {
    const Record& r = records[i];
    if (r.layer_index != i - 1) throw FormatError("checkpoint: layer records out of order");
    switch (r.tag) {
      case Tag::dense: net.layers.emplace_back(nn::DenseLayer{to_matrix(r.tensor("W")), to_vector(r.tensor("b"))}); break;
      case Tag::conv:
        net.layers.emplace_back(nn::ConvLayer{attr(r, 0), attr(r, 1), attr(r, 2), attr(r, 3), attr(r, 4),
                                              to_matrix(r.tensor("W")), to_vector(r.tensor("b"))});
        break;
      case Tag::relu: net.layers.emplace_back(nn::ReluLayer{}); break;
      case Tag::flatten: net.layers.emplace_back(nn::FlattenLayer{}); break;
      case Tag::global_avg_pool: net.layers.emplace_back(nn::GlobalAvgPoolLayer{}); break;
      case Tag::bottleneck: {
        nn::BottleneckLayer b;
        if (attr(r, 0) > 1 || attr(r, 1) > 1) throw FormatError("checkpoint: bad bottleneck kind");
        b.kind = static_cast<nn::BottleneckKind>(attr(r, 0));
        b.variant = static_cast<nn::BasisVariant>(attr(r, 1));
        b.c_in = attr(r, 2);
        b.c_out = attr(r, 3);
        b.k = attr(r, 4);
        b.stride = attr(r, 5);
        b.padding = attr(r, 6);
        b.q_a = to_matrix(r.tensor("QA"));
        b.q_s = to_matrix(r.tensor("QS"));
        b.bias = to_vector(r.tensor("b"));
        bool depthwise = false;
        for (const auto& t : r.tensors) depthwise = depthwise || t.name == "D";
        if (depthwise)
          b.depthwise = to_matrix(r.tensor("D"));
        else
          b.core = to_matrix(r.tensor("Wp"));
        b.kept_rows = r.list("kept_rows").data;
        b.kept_cols = r.list("kept_cols").data;
        net.layers.emplace_back(std::move(b));
        break;
      }
      default: throw FormatError("checkpoint: unknown layer tag " + std::to_string(static_cast<int>(r.tag)));
    }
  }
  try {
    (void)nn::layer_shapes(net);
  } catch (const DimensionError& e) {
    throw FormatError(std::string("checkpoint: inconsistent layers: ") + e.what());
  }
  return net;
}

std::vector<std::uint8_t> encode_network(const nn::Network& net) { return encode(network_records(net)); }

nn::Network decode_network(std::span<const std::uint8_t> bytes) { return network_from_records(decode(bytes)); }

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

void save_network(const nn::Network& net, const std::filesystem::path& path) { write_bytes(path, encode_network(net)); }

nn::Network load_network(const std::filesystem::path& path) {
  try {
    return decode_network(read_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError("'" + path.string() + "': " + e.what());
  }
}

std::vector<std::uint8_t> encode_factors(const kfac::FactorSet& factors,
                                         const std::vector<std::optional<kfac::EigenFactors>>& eig) {
  std::vector<Record> recs;
  for (std::size_t li = 0; li < factors.size(); ++li) {
    if (!factors[li]) continue;
    const kfac::KronFactors& f = *factors[li];
    Record r{Tag::factors, static_cast<std::uint32_t>(li),
             {static_cast<std::uint32_t>(f.variant), static_cast<std::uint32_t>(f.sample_count & 0xffffffffu),
              static_cast<std::uint32_t>(static_cast<std::uint64_t>(f.sample_count) >> 32)},
             {make_tensor("A", f.a), make_tensor("S", f.s)},
             {}};
    if (li < eig.size() && eig[li]) {
      r.tensors.push_back(make_tensor("QA", eig[li]->q_a));
      r.tensors.push_back(make_tensor("QS", eig[li]->q_s));
      r.tensors.push_back(make_tensor("LA", eig[li]->lambda_a));
      r.tensors.push_back(make_tensor("LS", eig[li]->lambda_s));
    }
    recs.push_back(std::move(r));
  }
  return encode(recs);
}

kfac::FactorSet decode_factors(std::span<const std::uint8_t> bytes) {
  kfac::FactorSet out;
  for (const Record& r : decode(bytes)) {
    if (r.tag != Tag::factors) throw FormatError("factor file: unexpected record tag");
    if (attr(r, 0) > 2) throw FormatError("factor file: bad variant");
    if (out.size() <= r.layer_index) out.resize(r.layer_index + 1);
    out[r.layer_index] = kfac::KronFactors{to_matrix(r.tensor("A")), to_matrix(r.tensor("S")),
                                           attr(r, 1) | (static_cast<std::size_t>(attr(r, 2)) << 32),
                                           static_cast<kfac::FactorVariant>(attr(r, 0))};
  }
  return out;
}

void save_factors(const kfac::FactorSet& factors, const std::vector<std::optional<kfac::EigenFactors>>& eig,
                  const std::filesystem::path& path) {
  write_bytes(path, encode_factors(factors, eig));
}

std::size_t payload_count(std::span<const Record> records) {
  std::size_t n = 0;
  for (const Record& r : records)
    for (const Tensor& t : r.tensors) n += t.data.size();
  return n;
}

}  // namespace kfep::checkpoint
