#include "vinesim/stiffness.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace vinesim {

namespace {

constexpr double kEpsLo = 1e-4;
constexpr double kEpsHi = 1.0 - 1e-4;
constexpr double kGammaFull = M_PI - 1e-6;  // beyond this the tube is fully wrinkled

double sign_of(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

double WrinklingParams::effective_eps() const {
  if (eps_override) return std::clamp(*eps_override, kEpsLo, kEpsHi);
  return eps_from_pressure(pressure_pa, eps_poly, pressure_range_pa).value;
}

void WrinklingParams::validate() const {
  if (pressure_pa <= 0.0) throw std::invalid_argument("wrinkling model needs pressure > 0");
  if (tube_radius_m <= 0.0) throw std::invalid_argument("wrinkling model needs tube radius > 0");
  const double eps = effective_eps();
  if (!(eps > 0.0 && eps < 1.0))
    throw std::invalid_argument("effective eps_crit must lie in (0, 1)");
}

void LinearStiffnessParams::validate() const {
  if (k.size() < 1) throw std::invalid_argument("linear stiffness needs at least one k");
  if ((k.array() < 0.0).any()) throw std::invalid_argument("linear stiffness must be nonnegative");
}

double NeuralStiffnessParams::forward(double x) const {
  return w2.dot((w1 * x + b1).array().tanh().matrix()) + b2;
}

void NeuralStiffnessParams::validate() const {
  if (w1.size() != kHidden || b1.size() != kHidden || w2.size() != kHidden)
    throw std::invalid_argument("mlp stiffness must have 10 hidden units");
  if (!w1.allFinite() || !b1.allFinite() || !w2.allFinite() || !std::isfinite(b2))
    throw std::invalid_argument("mlp stiffness parameters must be finite");
}

double wrinkle_angle(double theta, double eps_crit) {
  if (theta < 0.0 || theta > M_PI) throw std::domain_error("bending angle must lie in [0, pi]");
  if (!(eps_crit > 0.0 && eps_crit < 1.0))
    throw std::domain_error("eps_crit must lie in (0, 1)");
  const double onset = 2.0 * std::asin(eps_crit);
  if (theta < onset) return 0.0;
  const double a = std::clamp(2.0 * eps_crit / std::sin(0.5 * theta) - 1.0, -1.0, 1.0);
  return std::acos(a);
}

MomentEval wrinkling_moment_eval(double theta, double eps_crit, double pressure_pa,
                                 double tube_radius_m) {
  const double full = M_PI * pressure_pa * tube_radius_m * tube_radius_m * tube_radius_m;
  const double onset = 2.0 * std::asin(eps_crit);

  MomentEval out;
  if (theta < onset) {
    // Linear-elastic ramp below wrinkling onset, chosen so the moment is
    // continuous at the onset angle where the closed form gives full/2.
    out.moment = 0.5 * full * theta / onset;
    out.d_theta = 0.5 * full / onset;
    const double donset_deps = 2.0 / std::sqrt(1.0 - eps_crit * eps_crit);
    out.d_eps = -0.5 * full * theta / (onset * onset) * donset_deps;
    return out;
  }

  const double half_sin = std::sin(0.5 * theta);
  const double a = std::clamp(2.0 * eps_crit / half_sin - 1.0, -1.0, 1.0);
  const double gamma = std::acos(a);
  if (gamma > kGammaFull) {
    out.moment = full;  // fully wrinkled limit
    return out;
  }

  const double sg = std::sin(gamma);
  const double cg = std::cos(gamma);
  const double pg = M_PI - gamma;
  const double num = std::sin(2.0 * gamma) + 2.0 * pg;
  const double den = 4.0 * (sg + pg * cg);
  out.moment = full * num / den;

  // d(num/den)/dgamma = sin(gamma) * q with q below; the sin cancels against
  // the one in dgamma/dtheta and dgamma/deps, so no singularity at onset.
  const double q = (-4.0 * sg * den + 4.0 * num * pg) / (den * den);
  const double half_cos = std::cos(0.5 * theta);
  out.d_theta = full * q * eps_crit * half_cos / (half_sin * half_sin);
  out.d_eps = full * q * (-2.0 / half_sin);
  return out;
}

double wrinkling_moment(double theta, const WrinklingParams& params) {
  return wrinkling_moment_eval(theta, params.effective_eps(), params.pressure_pa,
                               params.tube_radius_m)
      .moment;
}

EpsResult eps_from_pressure(double pressure_pa, const std::array<double, 4>& eps_poly,
                            const std::array<double, 2>& pressure_range_pa) {
  const double p = pressure_pa;
  const double raw = eps_poly[0] + p * (eps_poly[1] + p * (eps_poly[2] + p * eps_poly[3]));
  EpsResult r;
  r.value = std::clamp(raw, kEpsLo, kEpsHi);
  r.extrapolated = p < pressure_range_pa[0] || p > pressure_range_pa[1];
  return r;
}

namespace {

// Restoring moment at nonnegative bending angle, with derivatives w.r.t.
// the angle and the packed parameter vector.
struct RestoringEval {
  double value = 0.0;
  double d_angle = 0.0;
  Eigen::VectorXd d_params;
};

RestoringEval restoring(const WrinklingParams& p, int /*joint*/, double angle) {
  const MomentEval m =
      wrinkling_moment_eval(std::min(angle, M_PI), p.effective_eps(), p.pressure_pa, p.tube_radius_m);
  RestoringEval r;
  r.value = m.moment;
  r.d_angle = angle <= M_PI ? m.d_theta : 0.0;
  r.d_params = Eigen::VectorXd::Constant(1, m.d_eps);
  return r;
}

RestoringEval restoring(const LinearStiffnessParams& p, int joint, double angle) {
  RestoringEval r;
  r.value = p.k_at(joint) * angle;
  r.d_angle = p.k_at(joint);
  r.d_params = Eigen::VectorXd::Zero(p.k.size());
  r.d_params[std::min<Eigen::Index>(joint, p.k.size() - 1)] = angle;
  return r;
}

RestoringEval restoring(const NeuralStiffnessParams& p, int /*joint*/, double angle) {
  const Eigen::ArrayXd pre = (p.w1 * angle + p.b1).array();
  const Eigen::ArrayXd h = pre.tanh();
  const Eigen::ArrayXd dh = 1.0 - h.square();  // tanh'
  RestoringEval r;
  r.value = p.w2.dot(h.matrix()) + p.b2;
  r.d_angle = (p.w2.array() * dh * p.w1.array()).sum();
  r.d_params.resize(3 * NeuralStiffnessParams::kHidden + 1);
  r.d_params.segment(0, NeuralStiffnessParams::kHidden) = (p.w2.array() * dh * angle).matrix();
  r.d_params.segment(NeuralStiffnessParams::kHidden, NeuralStiffnessParams::kHidden) =
      (p.w2.array() * dh).matrix();
  r.d_params.segment(2 * NeuralStiffnessParams::kHidden, NeuralStiffnessParams::kHidden) =
      h.matrix();
  r.d_params[3 * NeuralStiffnessParams::kHidden] = 1.0;
  return r;
}

}  // namespace

TorqueEval joint_torque(const StiffnessModel& model, int joint, double theta, double theta_dot,
                        double damping) {
  const double s = sign_of(theta);
  const RestoringEval r = std::visit(
      [&](const auto& p) { return restoring(p, joint, std::abs(theta)); }, model);

  TorqueEval out;
  out.torque = -r.value * s - damping * theta_dot;
  // At theta == 0 the odd extension's two-sided derivative is -d_angle when
  // the restoring moment vanishes there; we use that value as the
  // subgradient choice for models with a nonzero offset.
  out.d_theta = -r.d_angle;
  out.d_theta_dot = -damping;
  out.d_damping = -theta_dot;
  out.d_params = s == 0.0 ? Eigen::VectorXd::Zero(r.d_params.size()).eval()
                          : (-s * r.d_params).eval();
  return out;
}

double moment(const StiffnessModel& model, double theta, double theta_dot, double damping) {
  return joint_torque(model, 0, theta, theta_dot, damping).torque;
}

int stiffness_param_count(const StiffnessModel& model) {
  return static_cast<int>(get_stiffness_params(model).size());
}

Eigen::VectorXd get_stiffness_params(const StiffnessModel& model) {
  if (const auto* w = std::get_if<WrinklingParams>(&model))
    return Eigen::VectorXd::Constant(1, w->effective_eps());
  if (const auto* l = std::get_if<LinearStiffnessParams>(&model)) return l->k;
  const auto& m = std::get<NeuralStiffnessParams>(model);
  Eigen::VectorXd v(3 * NeuralStiffnessParams::kHidden + 1);
  v << m.w1, m.b1, m.w2, m.b2;
  return v;
}

void set_stiffness_params(StiffnessModel& model, const Eigen::VectorXd& params) {
  if (auto* w = std::get_if<WrinklingParams>(&model)) {
    if (params.size() != 1) throw std::invalid_argument("wrinkling model takes one parameter");
    w->eps_override = std::clamp(params[0], kEpsLo, kEpsHi);
    return;
  }
  if (auto* l = std::get_if<LinearStiffnessParams>(&model)) {
    if (params.size() != l->k.size())
      throw std::invalid_argument("linear stiffness parameter size mismatch");
    l->k = params.cwiseMax(0.0);
    return;
  }
  auto& m = std::get<NeuralStiffnessParams>(model);
  constexpr int h = NeuralStiffnessParams::kHidden;
  if (params.size() != 3 * h + 1)
    throw std::invalid_argument("mlp stiffness parameter size mismatch");
  m.w1 = params.segment(0, h);
  m.b1 = params.segment(h, h);
  m.w2 = params.segment(2 * h, h);
  m.b2 = params[3 * h];
}

bool stiffness_is_neural(const StiffnessModel& model) {
  return std::holds_alternative<NeuralStiffnessParams>(model);
}

std::string stiffness_model_name(const StiffnessModel& model) {
  if (std::holds_alternative<WrinklingParams>(model)) return "wrinkling";
  if (std::holds_alternative<LinearStiffnessParams>(model)) return "linear";
  return "mlp";
}

nlohmann::json stiffness_to_json(const StiffnessModel& model) {
  nlohmann::json j;
  j["model"] = stiffness_model_name(model);
  if (const auto* w = std::get_if<WrinklingParams>(&model)) {
    j["eps_poly"] = w->eps_poly;
    if (w->eps_override) j["eps_override"] = *w->eps_override;
    j["pressure_range_pa"] = w->pressure_range_pa;
  } else if (const auto* l = std::get_if<LinearStiffnessParams>(&model)) {
    if (l->k.size() == 1) {
      j["k_nm_per_rad"] = l->k[0];
    } else {
      j["k_nm_per_rad"] = std::vector<double>(l->k.data(), l->k.data() + l->k.size());
    }
  } else {
    const auto& m = std::get<NeuralStiffnessParams>(model);
    j["w1"] = std::vector<double>(m.w1.data(), m.w1.data() + m.w1.size());
    j["b1"] = std::vector<double>(m.b1.data(), m.b1.data() + m.b1.size());
    j["w2"] = std::vector<double>(m.w2.data(), m.w2.data() + m.w2.size());
    j["b2"] = m.b2;
  }
  return j;
}

StiffnessModel stiffness_from_json(const nlohmann::json& j, double pressure_pa,
                                   double tube_radius_m) {
  const std::string name = j.at("model").get<std::string>();
  if (name == "wrinkling") {
    WrinklingParams w;
    w.pressure_pa = pressure_pa;
    w.tube_radius_m = tube_radius_m;
    if (j.contains("eps_poly")) w.eps_poly = j.at("eps_poly").get<std::array<double, 4>>();
    if (j.contains("eps_override")) w.eps_override = j.at("eps_override").get<double>();
    if (j.contains("pressure_range_pa"))
      w.pressure_range_pa = j.at("pressure_range_pa").get<std::array<double, 2>>();
    w.validate();
    return w;
  }
  if (name == "linear") {
    LinearStiffnessParams l;
    const auto& k = j.at("k_nm_per_rad");
    if (k.is_number()) {
      l.k = Eigen::VectorXd::Constant(1, k.get<double>());
    } else {
      const auto vec = k.get<std::vector<double>>();
      l.k = Eigen::Map<const Eigen::VectorXd>(vec.data(), static_cast<Eigen::Index>(vec.size()));
    }
    l.validate();
    return l;
  }
  if (name == "mlp") {
    NeuralStiffnessParams m;
    const auto w1 = j.at("w1").get<std::vector<double>>();
    const auto b1 = j.at("b1").get<std::vector<double>>();
    const auto w2 = j.at("w2").get<std::vector<double>>();
    m.w1 = Eigen::Map<const Eigen::VectorXd>(w1.data(), static_cast<Eigen::Index>(w1.size()));
    m.b1 = Eigen::Map<const Eigen::VectorXd>(b1.data(), static_cast<Eigen::Index>(b1.size()));
    m.w2 = Eigen::Map<const Eigen::VectorXd>(w2.data(), static_cast<Eigen::Index>(w2.size()));
    m.b2 = j.at("b2").get<double>();
    m.validate();
    return m;
  }
  throw std::invalid_argument("unknown stiffness model: " + name);
}

}  // namespace vinesim
