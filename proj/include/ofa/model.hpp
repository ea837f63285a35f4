#pragma once

// Toy-scale student and teacher.
//
// Student: frame-wise encoder -> alpha module (linear + sigmoid) -> alpha
// modification -> CIF pooling -> self-attention/FFN mixer blocks -> one linear
// prediction head per distilled teacher layer. The heads only exist for
// distillation; the inference path ends at the mixer output.
//
// Teacher: a frozen stack of frame-wise tanh layers, one representation per
// layer, all of the input length.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ofa/alphamod.hpp"
#include "ofa/cif.hpp"
#include "ofa/diffmath.hpp"
#include "ofa/error.hpp"
#include "ofa/matrix.hpp"
#include "ofa/rng.hpp"

namespace ofa {

struct ModelDims {
  std::size_t input_dim = 8;
  std::size_t hidden = 16;
  std::size_t ffn = 32;
  std::size_t blocks = 2;
  std::size_t teacher_dim = 8;
  std::size_t teacher_layers = 2;

  void validate() const {
    if (input_dim == 0 || hidden == 0 || ffn == 0 || teacher_dim == 0 || teacher_layers == 0)
      throw Error(ErrorCode::config, "model dimensions must be positive");
  }

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct NamedMatrix {
  std::string name;
  Matrix value;

  friend bool operator==(const NamedMatrix&, const NamedMatrix&) = default;
};

namespace detail {

// Uniform Glorot initialisation.
inline Matrix glorot(std::size_t rows, std::size_t cols, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.uniform(-a, a);
  return m;
}

inline const Matrix& find_param(const std::vector<NamedMatrix>& params, std::string_view name) {
  for (const auto& p : params)
    if (p.name == name) return p.value;
  throw Error(ErrorCode::invalid_argument, "no parameter named '" + std::string(name) + "'");
}

}  // namespace detail

class StudentModel {
 public:
  StudentModel() = default;

  static StudentModel initialize(const ModelDims& dims, Rng& rng) {
    dims.validate();
    StudentModel m;
    m.dims_ = dims;
    auto add = [&](std::string name, Matrix v) { m.params_.push_back({std::move(name), std::move(v)}); };
    const std::size_t d = dims.hidden;
    add("encoder.weight", detail::glorot(dims.input_dim, d, rng));
    add("encoder.bias", Matrix(1, d));
    add("alpha.weight", detail::glorot(d, 1, rng));
    add("alpha.bias", Matrix(1, 1));
    for (std::size_t b = 0; b < dims.blocks; ++b) {
      const std::string p = "mixer." + std::to_string(b) + ".";
      add(p + "query", detail::glorot(d, d, rng));
      add(p + "key", detail::glorot(d, d, rng));
      add(p + "value", detail::glorot(d, d, rng));
      add(p + "output", detail::glorot(d, d, rng));
      add(p + "ffn_in.weight", detail::glorot(d, dims.ffn, rng));
      add(p + "ffn_in.bias", Matrix(1, dims.ffn));
      add(p + "ffn_out.weight", detail::glorot(dims.ffn, d, rng));
      add(p + "ffn_out.bias", Matrix(1, d));
    }
    for (std::size_t k = 0; k < dims.teacher_layers; ++k) {
      const std::string p = "head." + std::to_string(k) + ".";
      add(p + "weight", detail::glorot(d, dims.teacher_dim, rng));
      add(p + "bias", Matrix(1, dims.teacher_dim));
    }
    return m;
  }

  // Rebuild from named blocks (e.g. a checkpoint). Blocks must match the
  // layout produced by initialize() for these dims.
  static StudentModel from_parameters(const ModelDims& dims, std::vector<NamedMatrix> params) {
    Rng scratch(0);
    StudentModel layout = initialize(dims, scratch);
    if (params.size() != layout.params_.size())
      throw Error(ErrorCode::dimension_mismatch, "student parameter count mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (params[i].name != layout.params_[i].name || !params[i].value.same_shape(layout.params_[i].value))
        throw Error(ErrorCode::dimension_mismatch, "unexpected student parameter block '" + params[i].name + "'");
    }
    layout.params_ = std::move(params);
    return layout;
  }

  const ModelDims& dims() const noexcept { return dims_; }
  std::vector<NamedMatrix>& parameters() noexcept { return params_; }
  const std::vector<NamedMatrix>& parameters() const noexcept { return params_; }
  const Matrix& param(std::string_view name) const { return detail::find_param(params_, name); }
  Matrix& param(std::string_view name) { return const_cast<Matrix&>(detail::find_param(params_, name)); }

  friend bool operator==(const StudentModel&, const StudentModel&) = default;

 private:
  ModelDims dims_;
  std::vector<NamedMatrix> params_;
};

class TeacherModel {
 public:
  TeacherModel() = default;

  static TeacherModel initialize(const ModelDims& dims, Rng& rng) {
    dims.validate();
    TeacherModel t;
    std::size_t in = dims.input_dim;
    for (std::size_t l = 0; l < dims.teacher_layers; ++l) {
      const std::string p = "teacher." + std::to_string(l) + ".";
      // Gain 2 keeps the frozen layers away from the linear regime of tanh.
      Matrix w = detail::glorot(in, dims.teacher_dim, rng);
      for (double& v : w.data()) v *= 2.0;
      t.params_.push_back({p + "weight", std::move(w)});
      Matrix b(1, dims.teacher_dim);
      for (double& v : b.data()) v = rng.uniform(-0.5, 0.5);
      t.params_.push_back({p + "bias", std::move(b)});
      in = dims.teacher_dim;
    }
    return t;
  }

  static TeacherModel from_parameters(std::vector<NamedMatrix> params) {
    if (params.empty() || params.size() % 2 != 0)
      throw Error(ErrorCode::dimension_mismatch, "teacher needs weight/bias pairs");
    TeacherModel t;
    t.params_ = std::move(params);
    return t;
  }

  std::size_t layer_count() const noexcept { return params_.size() / 2; }
  const std::vector<NamedMatrix>& parameters() const noexcept { return params_; }

  // One T x teacher_dim representation per layer.
  std::vector<Matrix> forward(const Matrix& features) const {
    std::vector<Matrix> layers;
    const Matrix* x = &features;
    for (std::size_t l = 0; l < layer_count(); ++l) {
      const Matrix& w = params_[2 * l].value;
      const Matrix& b = params_[2 * l + 1].value;
      Matrix h = matmul(*x, w);
      for (std::size_t i = 0; i < h.rows(); ++i)
        for (std::size_t j = 0; j < h.cols(); ++j) h(i, j) = std::tanh(h(i, j) + b(0, j));
      layers.push_back(std::move(h));
      x = &layers.back();
    }
    return layers;
  }

  friend bool operator==(const TeacherModel&, const TeacherModel&) = default;

 private:
  std::vector<NamedMatrix> params_;
};

inline std::vector<Matrix> teacher_forward(const TeacherModel& teacher, const FeatureSequence& features) {
  return teacher.forward(features.frames);
}

// Student parameters placed on a tape, in StudentModel::parameters() order.
struct BoundStudent {
  struct Block {
    ad::Var query, key, value, output, ffn_in_w, ffn_in_b, ffn_out_w, ffn_out_b;
  };
  ad::Var encoder_w, encoder_b, alpha_w, alpha_b;
  std::vector<Block> blocks;
  std::vector<std::pair<ad::Var, ad::Var>> heads;
  std::vector<ad::Var> all;
};

// Wires already-placed nodes; vars must follow StudentModel::parameters() order.
inline BoundStudent bind_vars(const ModelDims& dims, std::vector<ad::Var> vars) {
  BoundStudent b;
  b.all = std::move(vars);
  std::size_t expected = 4 + 8 * dims.blocks + 2 * dims.teacher_layers;
  if (b.all.size() != expected) throw Error(ErrorCode::dimension_mismatch, "student parameter count mismatch");
  std::size_t i = 0;
  b.encoder_w = b.all[i++];
  b.encoder_b = b.all[i++];
  b.alpha_w = b.all[i++];
  b.alpha_b = b.all[i++];
  for (std::size_t k = 0; k < dims.blocks; ++k) {
    BoundStudent::Block blk;
    blk.query = b.all[i++];
    blk.key = b.all[i++];
    blk.value = b.all[i++];
    blk.output = b.all[i++];
    blk.ffn_in_w = b.all[i++];
    blk.ffn_in_b = b.all[i++];
    blk.ffn_out_w = b.all[i++];
    blk.ffn_out_b = b.all[i++];
    b.blocks.push_back(blk);
  }
  for (std::size_t k = 0; k < dims.teacher_layers; ++k) {
    ad::Var w = b.all[i++];
    ad::Var bias = b.all[i++];
    b.heads.emplace_back(w, bias);
  }
  return b;
}

inline BoundStudent bind(ad::Tape& tape, const StudentModel& model, bool trainable) {
  std::vector<ad::Var> vars;
  for (const auto& p : model.parameters()) vars.push_back(trainable ? tape.parameter(p.value) : tape.constant(p.value));
  return bind_vars(model.dims(), std::move(vars));
}

struct StudentGraph {
  ad::Var encoded;         // T x hidden
  ad::Var alpha_raw;       // T x 1, before modification
  ad::Var alpha_mod;       // T x 1
  Segmentation segmentation;
  ad::Var pooling;         // N x T pooling matrix
  ad::Var pooled;          // N x hidden
  ad::Var representation;  // N x hidden, mixer output
  std::vector<ad::Var> heads;
  // Multiply-accumulates spent in the alpha module and the mixer.
  std::uint64_t counted_macs = 0;
};

inline ad::Var alpha_module(const BoundStudent& s, ad::Var encoded) {
  return ad::sigmoid(ad::add(ad::matmul(encoded, s.alpha_w), s.alpha_b));
}

inline ad::Var encoder_forward(const BoundStudent& s, ad::Var features) {
  return ad::tanh(ad::add(ad::matmul(features, s.encoder_w), s.encoder_b));
}

inline ad::Var mixer_block(const BoundStudent::Block& blk, ad::Var x) {
  using namespace ad;
  const double scale = 1.0 / std::sqrt(static_cast<double>(x.cols()));
  Var q = matmul(x, blk.query);
  Var k = matmul(x, blk.key);
  Var v = matmul(x, blk.value);
  Var attn = softmax_rows(ad::scale(matmul(q, transpose(k)), scale));
  Var x1 = add(x, matmul(matmul(attn, v), blk.output));
  Var h = ad::tanh(add(matmul(x1, blk.ffn_in_w), blk.ffn_in_b));
  return add(x1, add(matmul(h, blk.ffn_out_w), blk.ffn_out_b));
}

inline ad::Var mixer_forward(const BoundStudent& s, ad::Var x) {
  for (const auto& blk : s.blocks) x = mixer_block(blk, x);
  return x;
}

// Full student pipeline. lambda is a 1x1 node (constant or trainable).
inline StudentGraph student_forward(ad::Tape& tape, const BoundStudent& s, const Matrix& features, ad::Var lambda,
                                    const CifOptions& cif = {}, bool with_heads = true) {
  StudentGraph g;
  ad::Var x = tape.constant(features);
  g.encoded = encoder_forward(s, x);
  const std::uint64_t before_alpha = tape.macs();
  g.alpha_raw = alpha_module(s, g.encoded);
  const std::uint64_t alpha_macs = tape.macs() - before_alpha;
  g.alpha_mod = ad::modify_alpha(g.alpha_raw, lambda);
  g.segmentation = integrate_and_fire(g.alpha_mod.value().data(), cif);
  g.pooling = ad::pooling_weights(g.alpha_mod, g.segmentation);
  g.pooled = ad::matmul(g.pooling, g.encoded);
  const std::uint64_t before_mixer = tape.macs();
  g.representation = mixer_forward(s, g.pooled);
  g.counted_macs = alpha_macs + (tape.macs() - before_mixer);
  if (with_heads) {
    for (const auto& [w, b] : s.heads) g.heads.push_back(ad::add(ad::matmul(g.representation, w), b));
  }
  return g;
}

// Value-only convenience wrapper.
struct StudentOutputs {
  AlphaWeights alpha_raw;
  AlphaWeights alpha_mod;
  Segmentation segmentation;
  Matrix pooled;
  Matrix representation;
  std::vector<Matrix> heads;
};

inline StudentOutputs student_forward(const StudentModel& model, const FeatureSequence& features, double lambda,
                                      const CifOptions& cif = {}) {
  ad::Tape tape;
  BoundStudent s = bind(tape, model, false);
  StudentGraph g = student_forward(tape, s, features.frames, tape.constant(Matrix::scalar(lambda)), cif);
  StudentOutputs out;
  out.alpha_raw = g.alpha_raw.value().values();
  out.alpha_mod = g.alpha_mod.value().values();
  out.segmentation = g.segmentation;
  out.pooled = g.pooled.value();
  out.representation = g.representation.value();
  for (const auto& h : g.heads) out.heads.push_back(h.value());
  return out;
}

inline AlphaWeights alpha_module(const StudentModel& model, const Matrix& encoded) {
  ad::Tape tape;
  BoundStudent s = bind(tape, model, false);
  return alpha_module(s, tape.constant(encoded)).value().values();
}

// ---------------------------------------------------------------------------
// Checkpoint: "OFAC", u32 version, then named blocks until end of file:
//   u16 name length, name bytes, u32 rows, u32 cols, rows*cols f64, all
//   little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelDims dims;
  StudentModel student;
  TeacherModel teacher;
  SampleRange range = SampleRange::full();
  CifOptions cif;

  friend bool operator==(const Checkpoint& a, const Checkpoint& b) {
    return a.dims == b.dims && a.student == b.student && a.teacher == b.teacher && a.range == b.range &&
           a.cif.threshold == b.cif.threshold && a.cif.tail_threshold == b.cif.tail_threshold &&
           a.cif.eps == b.cif.eps;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "byte I/O assumes a little-endian host");

template <class T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T get(const char* what) {
    if (bytes_.size() - pos_ < sizeof(T))
      throw Error(ErrorCode::truncated, std::string("unexpected end of data reading ") + what);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) throw Error(ErrorCode::truncated, std::string("unexpected end of data reading ") + what);
    std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool done() const noexcept { return pos_ == bytes_.size(); }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

inline void put_block(std::string& out, const std::string& name, const Matrix& m) {
  put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
  out += name;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
  for (double v : m.data()) put<double>(out, v);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot open '" + path + "'");
  return std::string(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::io, "cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::io, "write failed for '" + path + "'");
}

}  // namespace detail

inline std::vector<NamedMatrix> checkpoint_blocks(const Checkpoint& ck) {
  std::vector<NamedMatrix> blocks;
  const ModelDims& d = ck.dims;
  blocks.push_back({"meta.dims", Matrix(1, 6, {double(d.input_dim), double(d.hidden), double(d.ffn), double(d.blocks),
                                               double(d.teacher_dim), double(d.teacher_layers)})});
  blocks.push_back({"meta.lambda_range", Matrix(1, 2, {ck.range.low, ck.range.high})});
  blocks.push_back({"meta.cif", Matrix(1, 3, {ck.cif.threshold, ck.cif.tail_threshold, ck.cif.eps})});
  for (const auto& p : ck.student.parameters()) blocks.push_back(p);
  for (const auto& p : ck.teacher.parameters()) blocks.push_back(p);
  return blocks;
}

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out = "OFAC";
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  for (const auto& b : checkpoint_blocks(ck)) detail::put_block(out, b.name, b.value);
  return out;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.take(std::min<std::size_t>(4, bytes.size()), "magic") != "OFAC")
    throw Error(ErrorCode::bad_magic, "not a checkpoint (expected OFAC)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw Error(ErrorCode::unsupported_version, "checkpoint version " + std::to_string(version));
  std::vector<NamedMatrix> blocks;
  while (!r.done()) {
    const auto len = r.get<std::uint16_t>("name length");
    std::string name(r.take(len, "name"));
    const auto rows = r.get<std::uint32_t>("rows");
    const auto cols = r.get<std::uint32_t>("cols");
    if (static_cast<std::uint64_t>(rows) * cols * sizeof(double) > r.remaining())
      throw Error(ErrorCode::truncated, "block '" + name + "' payload");
    std::vector<double> v(static_cast<std::size_t>(rows) * cols);
    for (double& x : v) x = r.get<double>("value");
    blocks.push_back({std::move(name), Matrix(rows, cols, std::move(v))});
  }
  if (blocks.size() < 3 || blocks[0].name != "meta.dims" || blocks[1].name != "meta.lambda_range" ||
      blocks[2].name != "meta.cif")
    throw Error(ErrorCode::invalid_argument, "checkpoint is missing metadata blocks");
  Checkpoint ck;
  const Matrix& d = blocks[0].value;
  if (d.size() != 6) throw Error(ErrorCode::dimension_mismatch, "meta.dims must hold 6 values");
  for (double v : d.data())
    if (!(v >= 0.0 && v <= 1e6) || v != std::floor(v))
      throw Error(ErrorCode::dimension_mismatch, "meta.dims holds an invalid dimension");
  ck.dims = {std::size_t(d[0]), std::size_t(d[1]), std::size_t(d[2]), std::size_t(d[3]), std::size_t(d[4]),
             std::size_t(d[5])};
  ck.dims.validate();
  if (blocks[1].value.size() != 2 || blocks[2].value.size() != 3)
    throw Error(ErrorCode::dimension_mismatch, "malformed checkpoint metadata");
  ck.range = {blocks[1].value[0], blocks[1].value[1]};
  ck.cif = {blocks[2].value[0], blocks[2].value[1], blocks[2].value[2]};
  std::vector<NamedMatrix> student, teacher;
  for (std::size_t i = 3; i < blocks.size(); ++i)
    (blocks[i].name.starts_with("teacher.") ? teacher : student).push_back(std::move(blocks[i]));
  ck.student = StudentModel::from_parameters(ck.dims, std::move(student));
  ck.teacher = TeacherModel::from_parameters(std::move(teacher));
  if (ck.teacher.layer_count() != ck.dims.teacher_layers)
    throw Error(ErrorCode::dimension_mismatch, "teacher layer count does not match head count");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  detail::write_file(path, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) { return decode_checkpoint(detail::read_file(path)); }

}  // namespace ofa
