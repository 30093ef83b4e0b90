#include "sra/models.hpp"

#include <random>
#include <stdexcept>

namespace sra {

std::string to_string(Variant v) {
  switch (v) {
    case Variant::ERM: return "ERM";
    case Variant::IRM: return "IRM";
    case Variant::VREX: return "VREX";
    case Variant::IB_ERM: return "IB_ERM";
    case Variant::DANN: return "DANN";
    case Variant::CDANN: return "CDANN";
    case Variant::AUG_ERM: return "AUG_ERM";
    case Variant::SRA: return "SRA";
  }
  return "?";
}

Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::ERM, Variant::IRM, Variant::VREX, Variant::IB_ERM, Variant::DANN, Variant::CDANN,
                    Variant::AUG_ERM, Variant::SRA})
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown variant '" + s + "'");
}

Conditioning conditioning_for(Variant v) {
  switch (v) {
    case Variant::CDANN: return Conditioning::Class;
    case Variant::SRA: return Conditioning::Subspace;
    default: return Conditioning::None;
  }
}

namespace {

Matrix glorot(Eigen::Index fan_in, Eigen::Index fan_out, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / double(fan_in + fan_out)));
  Matrix w(fan_in, fan_out);
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = nd(rng);
  return w;
}

Matrix dense(const Matrix& x, const Param& w, const Param& b) {
  return (x * w.value).rowwise() + b.value.row(0);
}

}  // namespace

ModelBundle::ModelBundle(Variant v, const Architecture& a, std::uint64_t seed) : variant(v), arch(a) {
  std::mt19937_64 rng(seed);
  params.add("enc.w0", glorot(a.input_dim, a.hidden, rng));
  params.add("enc.b0", Matrix::Zero(1, a.hidden));
  params.add("enc.w1", glorot(a.hidden, a.hidden, rng));
  params.add("enc.b1", Matrix::Zero(1, a.hidden));
  params.add("enc.w2", glorot(a.hidden, a.latent_dim, rng));
  params.add("enc.b2", Matrix::Zero(1, a.latent_dim));
  params.add("cls.w", glorot(a.latent_dim, a.num_classes, rng));
  params.add("cls.b", Matrix::Zero(1, a.num_classes));
  if (a.num_domains > 0) {
    const int in = a.latent_dim + a.conditioning_width;
    params.add("disc.w0", glorot(in, a.disc_hidden, rng));
    params.add("disc.b0", Matrix::Zero(1, a.disc_hidden));
    params.add("disc.w1", glorot(a.disc_hidden, a.num_domains, rng));
    params.add("disc.b1", Matrix::Zero(1, a.num_domains));
  }
  if (a.num_prototypes > 0) {
    PrototypeSet p = init_prototypes(1, a.num_prototypes, a.latent_dim, rng());
    params.add("protos", p.vectors);
    prototype_weights = p.weights;
  }
}

PrototypeSet ModelBundle::prototypes() const {
  if (!has_prototypes()) throw std::logic_error("model has no prototype set");
  return PrototypeSet{params.at("protos").value, prototype_weights};
}

Var ModelBundle::encode(Tape& t, Var x) {
  Var h = tanh(affine(x, t.param(params, "enc.w0"), t.param(params, "enc.b0")));
  h = tanh(affine(h, t.param(params, "enc.w1"), t.param(params, "enc.b1")));
  return affine(h, t.param(params, "enc.w2"), t.param(params, "enc.b2"));
}

Var ModelBundle::classify(Tape& t, Var z) { return affine(z, t.param(params, "cls.w"), t.param(params, "cls.b")); }

Var ModelBundle::discriminate(Tape& t, Var input) {
  if (!has_discriminator()) throw std::logic_error("model has no discriminator");
  Var h = relu(affine(input, t.param(params, "disc.w0"), t.param(params, "disc.b0")));
  return affine(h, t.param(params, "disc.w1"), t.param(params, "disc.b1"));
}

Matrix ModelBundle::encode(const Matrix& x) const {
  if (x.cols() != arch.input_dim) throw ShapeError("encode: expected input width " + std::to_string(arch.input_dim));
  Matrix h = dense(x, params.at("enc.w0"), params.at("enc.b0")).array().tanh().matrix();
  h = dense(h, params.at("enc.w1"), params.at("enc.b1")).array().tanh().matrix();
  return dense(h, params.at("enc.w2"), params.at("enc.b2"));
}

Matrix ModelBundle::logits(const Matrix& x) const {
  return dense(encode(x), params.at("cls.w"), params.at("cls.b"));
}

Matrix ModelBundle::predict_proba(const Matrix& x) const { return softmax_rows(logits(x)); }

}  // namespace sra
