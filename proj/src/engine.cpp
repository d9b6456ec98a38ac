#include "fcpmp/engine.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <exception>
#include <limits>
#include <stdexcept>
#include <unordered_map>
#include <utility>

namespace fcpmp::eng {

namespace {

constexpr double kDomainGuard = 1e-9;

struct AxisMap {
  double a = 1, b = 0;  // u = a*x + b
};

AxisMap axis_map(double lo, double hi, double sign, double center) {
  const double half = 0.5 * (hi - lo);
  const double mid = 0.5 * (hi + lo);
  return {sign / half, -(sign * center + mid) / half};
}

Vec2 fold_signs(const cheb::FitDomain& dom, Vec2 receiver_est, Vec2 center,
                bool fold) {
  double sx = (!fold || receiver_est.x - center.x >= 0.0) ? 1.0 : -1.0;
  double sy = (!fold || receiver_est.y - center.y >= 0.0) ? 1.0 : -1.0;
  if (std::abs(dom.x_lo) > std::abs(dom.x_hi)) sx = -sx;
  if (std::abs(dom.y_lo) > std::abs(dom.y_hi)) sy = -sy;
  return {sx, sy};
}

// Unit-range band fits for the spatial surface. The quadratic truncation
// reads the surrogate's value, gradient, and Hessian at the receiver, so the
// fit domain should be a tight neighborhood of the receiver's folded offset
// from the sender (in units of the measured range), not the whole quarter
// square: narrow bands keep the cone apex out of the domain and make the
// degree-2 read nearly exact where it is used.
constexpr double kBandStep = 0.2;
constexpr int kBandCells = 7;  // centers 0, 0.2, ..., 1.2 times the range

int band_index(double ratio) {
  if (!(ratio < kBandStep * (kBandCells - 1))) return kBandCells - 1;
  return static_cast<int>(std::lround(ratio / kBandStep));
}

const cheb::ChebCoeffMatrix& band_fit(int ix, int iy) {
  static const auto table = [] {
    std::array<cheb::ChebCoeffMatrix, kBandCells * kBandCells> t;
    for (int i = 0; i < kBandCells; ++i)
      for (int j = 0; j < kBandCells; ++j) {
        const cheb::FitDomain dom{std::max(0.0, (i - 1) * kBandStep),
                                  (i + 1) * kBandStep,
                                  std::max(0.0, (j - 1) * kBandStep),
                                  (j + 1) * kBandStep};
        t[i * kBandCells + j] = cheb::fit_distance_surface(dom);
      }
    return t;
  }();
  return table[ix * kBandCells + iy];
}

// Scale so the receiver's folded offset always lands inside the band table;
// reads outside the fitted domain give meaningless derivatives.
double spatial_scale(double z, Vec2 cen) {
  constexpr double kMaxRatio = kBandStep * (kBandCells - 1);
  return std::max({z, std::abs(cen.x) / kMaxRatio, std::abs(cen.y) / kMaxRatio,
                   kDomainGuard});
}

// Fraction of the largest message surface scale the per-iteration step may
// cover. Every surface is read in-band at the current frame, so steps of the
// order of the source distances self-correct on the next re-read; the cap
// only has to bound the launches a near-singular fused precision produces.
constexpr double kTrustFraction = 0.6;

double message_trust(const ChebPolicy& p, double z, Vec2 cen) {
  if (p.mode == ChebPolicy::Mode::Fixed) {
    const auto& d = p.fixed_spatial.domain;
    return kTrustFraction * std::max({std::abs(d.x_lo), std::abs(d.x_hi),
                                      std::abs(d.y_lo), std::abs(d.y_hi)});
  }
  return kTrustFraction * spatial_scale(z, cen);
}

cheb::ChebCoeffMatrix spatial_fit(double z, Vec2 cen, const ChebPolicy& p) {
  if (p.mode == ChebPolicy::Mode::Fixed) return p.fixed_spatial;
  const double s = spatial_scale(z, cen);
  return scaled_fit(
      band_fit(band_index(std::abs(cen.x) / s), band_index(std::abs(cen.y) / s)), s);
}

cheb::ChebCoeffMatrix temporal_fit(double z, Vec2 cen, const ChebPolicy& p) {
  if (p.mode == ChebPolicy::Mode::Fixed) return p.fixed_temporal;
  const double s = std::max({p.range_factor * z, std::abs(cen.x), std::abs(cen.y),
                             kDomainGuard});
  return scaled_fit(unit_symmetric_fit(), s);
}

msg::MessageParams unimodal_frame_message(double z, double var, Vec2 center,
                                          Vec2 frame, const ChebPolicy& policy,
                                          bool anchor) {
  const Vec2 cen{center.x - frame.x, center.y - frame.y};
  const cheb::ChebCoeffMatrix fit = spatial_fit(z, cen, policy);
  const bool fold = policy.mode == ChebPolicy::Mode::Fixed ? policy.fold : true;
  const Vec2 signs = fold_signs(fit.domain, {0.0, 0.0}, cen, fold);
  const cheb::ChebCoeffMatrix C = pull_back(fit, signs, cen);
  msg::RangeObservation obs{z, var, -1, msg::ObsKind::External};
  if (anchor) return msg::anchor_spatial_message(obs, cen, C);
  return msg::agent_spatial_message(obs, msg::ModeCenters{cen, {}}, C);
}

// Exact translation of an exponent from xi = x - frame back to world x.
fuse::QuadraticForm form_to_world(const fuse::QuadraticForm& q, Vec2 frame) {
  fuse::QuadraticForm w = q;
  w.C = q.C + 2.0 * q.A * frame.x - q.E * frame.y;
  w.D = q.D + 2.0 * q.B * frame.y - q.E * frame.x;
  return w;
}

msg::MessageParams recentered_params(const fuse::GaussianBelief& b, Vec2 frame) {
  fuse::GaussianBelief s = b;
  s.mean.x -= frame.x;
  s.mean.y -= frame.y;
  return fuse::to_params(s);
}

}  // namespace

const cheb::ChebCoeffMatrix& unit_quarter_fit() {
  static const cheb::ChebCoeffMatrix fit =
      cheb::fit_distance_surface({0.0, 1.0, 0.0, 1.0});
  return fit;
}

const cheb::ChebCoeffMatrix& unit_symmetric_fit() {
  static const cheb::ChebCoeffMatrix fit =
      cheb::fit_distance_surface({-1.0, 1.0, -1.0, 1.0});
  return fit;
}

cheb::ChebCoeffMatrix scaled_fit(const cheb::ChebCoeffMatrix& unit, double s) {
  cheb::ChebCoeffMatrix out = unit;
  for (auto& row : out.c)
    for (double& v : row) v *= s;
  out.domain = {unit.domain.x_lo * s, unit.domain.x_hi * s, unit.domain.y_lo * s,
                unit.domain.y_hi * s};
  return out;
}

cheb::ChebCoeffMatrix pull_back(const cheb::ChebCoeffMatrix& fit, Vec2 signs,
                                Vec2 center) {
  const AxisMap mx = axis_map(fit.domain.x_lo, fit.domain.x_hi, signs.x, center.x);
  const AxisMap my = axis_map(fit.domain.y_lo, fit.domain.y_hi, signs.y, center.y);
  auto basis = [](const AxisMap& m) {
    std::array<std::array<double, 3>, 3> u{};
    u[0] = {1.0, 0.0, 0.0};
    u[1] = {m.b, m.a, 0.0};
    u[2] = {m.a * m.a + 2.0 * m.b * m.b - 1.0, 4.0 * m.a * m.b, m.a * m.a};
    return u;
  };
  const auto ux = basis(mx);
  const auto uy = basis(my);
  cheb::ChebCoeffMatrix out;
  out.domain = {-1.0, 1.0, -1.0, 1.0};
  for (int k = 0; k < 3; ++k)
    for (int l = 0; l < 3; ++l) {
      double acc = 0;
      for (int n = 0; n < 3; ++n)
        for (int m = 0; m < 3; ++m) acc += fit.c[n][m] * ux[n][k] * uy[m][l];
      out.c[k][l] = acc;
    }
  return out;
}

ChebPolicy published_surface_policy() {
  ChebPolicy p;
  p.mode = ChebPolicy::Mode::Fixed;
  cheb::ChebCoeffMatrix ref = cheb::reference_coeffs();
  ref.domain = cheb::identify_domain(ref).domain;
  p.fixed_spatial = ref;
  p.fixed_temporal = ref;
  return p;
}

msg::MessageParams make_anchor_message(double z, double var, Vec2 anchor,
                                       Vec2 frame, const ChebPolicy& policy) {
  return unimodal_frame_message(z, var, anchor, frame, policy, true);
}

msg::MessageParams make_agent_message(double z, double var,
                                      const msg::ModeCenters& sender,
                                      Vec2 frame, const ChebPolicy& policy) {
  if (!sender.bimodal())
    return unimodal_frame_message(z, var, sender.primary, frame, policy, false);
  const msg::MessageParams m1 =
      unimodal_frame_message(z, var, sender.primary, frame, policy, false);
  const msg::MessageParams m2 =
      unimodal_frame_message(z, var, *sender.secondary, frame, policy, false);
  return msg::MessageParams::from_array((m1 + m2).as_array(),
                                        msg::MessageKind::AgentBimodal);
}

msg::MessageParams make_temporal_message(double z, double var, Vec2 prev_est,
                                         Vec2 frame, const ChebPolicy& policy) {
  const Vec2 cen{prev_est.x - frame.x, prev_est.y - frame.y};
  const cheb::ChebCoeffMatrix fit = temporal_fit(z, cen, policy);
  const Vec2 signs = fold_signs(fit.domain, cen, cen, false);
  const cheb::ChebCoeffMatrix C = pull_back(fit, signs, cen);
  msg::RangeObservation obs{z, var, -1, msg::ObsKind::Internal};
  return msg::temporal_message(obs, msg::ModeCenters{cen, {}}, C);
}

fuse::GaussianBelief uninformative_prior(const Rect& deploy_zone) {
  fuse::GaussianBelief b;
  b.mean = deploy_zone.center();
  const double w = deploy_zone.width();
  const double h = deploy_zone.height();
  b.cov_xx = w * w;
  b.cov_yy = h * h;
  b.cov_xy = 0.0;
  return b;
}

std::optional<msg::ModeCenters> circle_intersection(Vec2 c1, double z1, Vec2 c2,
                                                    double z2) {
  const double dx = c2.x - c1.x;
  const double dy = c2.y - c1.y;
  const double d = std::hypot(dx, dy);
  if (d < 1e-12) return std::nullopt;
  const double a = (z1 * z1 - z2 * z2 + d * d) / (2.0 * d);
  const double h2 = z1 * z1 - a * a;
  if (h2 <= 0.0) return std::nullopt;
  const double h = std::sqrt(h2);
  const double ex = dx / d, ey = dy / d;
  const Vec2 base{c1.x + a * ex, c1.y + a * ey};
  msg::ModeCenters mc;
  mc.primary = {base.x - h * ey, base.y + h * ex};
  mc.secondary = Vec2{base.x + h * ey, base.y - h * ex};
  return mc;
}

namespace {

SlotResult run_slot_impl(const sim::NetworkState& net,
                         std::span<const AgentSlotInput> agents,
                         const sim::MeasurementSet& meas,
                         const IterationSchedule& sched, const ChebPolicy& policy,
                         bool parallel) {
  const int n = static_cast<int>(net.agents.size());
  if (static_cast<int>(agents.size()) != n)
    throw std::invalid_argument("run_slot: prior count " +
                                std::to_string(agents.size()) +
                                " does not match agent count " + std::to_string(n));
  if (sched.l_max < 1 || sched.l_max > 100)
    throw std::invalid_argument("run_slot: l_max out of range [1, 100]");

  std::vector<std::vector<const sim::ExternalObs*>> ext(n);
  for (const sim::ExternalObs& e : meas.externals) {
    if (e.receiver < 0 || e.receiver >= n)
      throw std::invalid_argument("run_slot: observation receiver out of range");
    const int limit =
        e.source_is_anchor ? static_cast<int>(net.anchors.size()) : n;
    if (e.source < 0 || e.source >= limit)
      throw std::invalid_argument("run_slot: observation source out of range");
    ext[e.receiver].push_back(&e);
  }

  std::vector<fuse::GaussianBelief> fallback(n);
  std::vector<fuse::GaussianBelief> cur(n), next(n);
  std::vector<char> cur_inf(n), next_inf(n), locked(n), next_locked(n);
  std::vector<char> fused_any(n);
  std::vector<long long> msg_count(n, 0), enh_count(n, 0);

  for (int i = 0; i < n; ++i) {
    const AgentSlotInput& in = agents[i];
    cur[i] = in.prior;
    cur_inf[i] = in.informative ? 1 : 0;
    locked[i] = in.informative ? 1 : 0;
    fallback[i] = in.prior;
    if (in.internal_z) {
      const double spread = *in.internal_z * *in.internal_z + in.internal_var;
      fallback[i].cov_xx += spread;
      fallback[i].cov_yy += spread;
    }
  }

  SlotResult out;
  out.trace.reserve(sched.l_max);
  out.final_forms.resize(n);
  if (sched.record_inputs != RecordInputs::None)
    out.inputs.assign(sched.l_max, std::vector<AgentInputs>(n));

  for (int l = 1; l <= sched.l_max; ++l) {
    const bool record = sched.record_inputs == RecordInputs::All ||
                        (sched.record_inputs == RecordInputs::Final && l == sched.l_max);
    // An exception escaping an OpenMP region terminates the process, so
    // capture the first one and rethrow it on the serial side.
    std::exception_ptr loop_error = nullptr;
#pragma omp parallel for schedule(static) if (parallel)
    for (int i = 0; i < n; ++i) {
      try {
      const Vec2 frame = cur[i].mean;
      msg::MessageParams temporal;
      if (agents[i].internal_z) {
        // The displacement ring sits around the previous estimate, which is
        // itself uncertain; the ring width absorbs that spread (Gaussian
        // surrogate for marginalizing the center out of the convolution).
        const double var_eff =
            agents[i].internal_var +
            0.5 * (agents[i].prior.cov_xx + agents[i].prior.cov_yy);
        temporal = make_temporal_message(*agents[i].internal_z, var_eff,
                                         agents[i].prior.mean, frame, policy);
      } else {
        temporal = recentered_params(agents[i].prior, frame);
      }
      std::vector<msg::MessageParams> spatial;
      std::vector<std::pair<Vec2, double>> sources;
      double trust = 0.0;
      AgentInputs* rec = record ? &out.inputs[l - 1][i] : nullptr;
      for (const sim::ExternalObs* e : ext[i]) {
        msg::MessageParams omega;
        gnn::NodeAttr attr;
        Vec2 center;
        if (e->source_is_anchor) {
          center = net.anchors[e->source];
          omega = make_anchor_message(e->z, e->var, center, frame, policy);
          attr = {center.x, center.y, 0.0, 0.0};
        } else {
          if (!cur_inf[e->source]) continue;
          const fuse::GaussianBelief& sb = cur[e->source];
          const msg::ModeCenters mc =
              (sb.modality == fuse::Modality::Bimodal && sb.centers)
                  ? *sb.centers
                  : msg::ModeCenters{sb.mean, {}};
          // A range ring around an uncertain sender is wider than the raw
          // measurement noise: widen by the sender's positional spread so a
          // poorly localized neighbor cannot outvote an anchor.
          const double var_eff = e->var + (sb.cov_xx + sb.cov_yy);
          omega = make_agent_message(e->z, var_eff, mc, frame, policy);
          attr = {sb.mean.x, sb.mean.y, sb.cov_xx, sb.cov_yy};
          center = sb.mean;
        }
        ++msg_count[i];
        sources.emplace_back(center, e->z);
        trust = std::max(trust, message_trust(policy, e->z,
                                              {center.x - frame.x, center.y - frame.y}));
        if (rec) rec->edges.push_back({omega, attr});
        if (sched.enhancer) {
          omega = gnn::enhance(omega, attr, *sched.enhancer).second;
          ++enh_count[i];
        }
        spatial.push_back(omega);
      }
      if (rec) {
        rec->temporal = temporal;
        rec->frame = frame;
      }

      next_locked[i] = locked[i];
      if (spatial.empty()) {
        next[i] = fallback[i];
        next[i].iteration = l;
        next_inf[i] = cur_inf[i];
        const msg::MessageParams p = fuse::to_params(next[i]);
        out.final_forms[i] = {p.w1, p.w2, p.w3, p.w4, p.w5};
        continue;
      }
      const fuse::QuadraticForm q = fuse::combine(temporal, spatial);
      fuse::GaussianBelief b = fuse::to_gaussian(q, sched.fusion_mode);
      // Trust region: the quadratic reads are local models, so a step is
      // only meaningful out to about one surface band width. Without the
      // cap, an indefinite combined form (receiver deep inside a ring)
      // launches the mean arbitrarily far and the iteration diverges; with
      // it, the next frame re-reads the surfaces where they are valid, and
      // the cap is inactive at the fixed point.
      const double step = std::hypot(b.mean.x, b.mean.y);
      const bool indefinite = !(q.A > 0.0 && 4.0 * q.A * q.B - q.E * q.E > 0.0);
      if (step > trust) {
        const double f = trust / step;
        b.mean.x *= f;
        b.mean.y *= f;
      }
      if (rec) {
        rec->trust = trust;
        rec->clamped = indefinite || step > trust;
      }
      b.mean.x += frame.x;
      b.mean.y += frame.y;
      b.iteration = l;
      if (!locked[i]) {
        if (sources.size() >= 3) {
          next_locked[i] = 1;
        } else if (sources.size() == 2) {
          const auto inter = circle_intersection(sources[0].first, sources[0].second,
                                                 sources[1].first, sources[1].second);
          if (inter) {
            b.modality = fuse::Modality::Bimodal;
            b.centers = inter;
          }
        }
      }
      next[i] = b;
      next_inf[i] = 1;
      fused_any[i] = 1;
      out.final_forms[i] = form_to_world(q, frame);
      } catch (...) {
#pragma omp critical
        if (!loop_error) loop_error = std::current_exception();
      }
    }
    if (loop_error) std::rethrow_exception(loop_error);
    cur = next;
    cur_inf = next_inf;
    locked = next_locked;
    out.trace.push_back(cur);
  }

  out.informative.assign(cur_inf.begin(), cur_inf.end());
  out.fused_spatial.assign(fused_any.begin(), fused_any.end());
  for (int i = 0; i < n; ++i) {
    out.messages_built += msg_count[i];
    out.enhancer_calls += enh_count[i];
  }
  return out;
}

}  // namespace

SlotResult run_slot(const sim::NetworkState& net, std::span<const AgentSlotInput> agents,
                    const sim::MeasurementSet& meas, const IterationSchedule& sched,
                    const ChebPolicy& policy) {
  return run_slot_impl(net, agents, meas, sched, policy, true);
}

SlotResult run_slot_reference(const sim::NetworkState& net,
                              std::span<const AgentSlotInput> agents,
                              const sim::MeasurementSet& meas,
                              const IterationSchedule& sched, const ChebPolicy& policy) {
  return run_slot_impl(net, agents, meas, sched, policy, false);
}

RealizationResult run_realization(const sim::Scenario& cfg,
                                  std::span<const sim::SlotRecord> slots,
                                  const IterationSchedule& sched,
                                  const ChebPolicy& policy) {
  RealizationResult out;
  std::unordered_map<int, std::pair<fuse::GaussianBelief, bool>> carry;
  for (const sim::SlotRecord& rec : slots) {
    const sim::NetworkState& st = rec.state;
    const int n = static_cast<int>(st.agents.size());
    std::vector<std::optional<double>> iz(n);
    std::vector<double> ivar(n, cfg.internal_var);
    for (const sim::InternalObs& o : rec.meas.internals) {
      iz[o.agent] = o.z;
      ivar[o.agent] = o.var;
    }
    std::vector<AgentSlotInput> in(n);
    for (int i = 0; i < n; ++i) {
      in[i].id = st.agents[i].id;
      auto it = carry.find(in[i].id);
      if (it != carry.end()) {
        in[i].prior = it->second.first;
        in[i].informative = it->second.second;
      } else {
        in[i].prior = uninformative_prior(cfg.deploy_zone);
        in[i].informative = false;
      }
      in[i].internal_z = iz[i];
      in[i].internal_var = ivar[i];
    }
    SlotOutcome o;
    o.t = st.t;
    o.result = run_slot(st, in, rec.meas, sched, policy);
    o.agent_ids.resize(n);
    o.truth.resize(n);
    for (int i = 0; i < n; ++i) {
      o.agent_ids[i] = st.agents[i].id;
      o.truth[i] = st.agents[i].pos;
    }
    carry.clear();
    const auto& last = o.result.trace.back();
    for (int i = 0; i < n; ++i)
      carry[o.agent_ids[i]] = {last[i], o.result.informative[i] != 0};
    out.slots.push_back(std::move(o));
  }
  return out;
}

void write_trace_header(std::ostream& out) {
  out << "run_id,method,t,iteration,agent_id,est_x,est_y,cov_xx,cov_xy,cov_yy\n";
}

void append_slot_trace(std::ostream& out, const std::string& run_id,
                       const std::string& method, const SlotOutcome& slot) {
  char buf[256];
  for (size_t l = 0; l < slot.result.trace.size(); ++l) {
    const auto& beliefs = slot.result.trace[l];
    for (size_t i = 0; i < beliefs.size(); ++i) {
      const fuse::GaussianBelief& b = beliefs[i];
      std::snprintf(buf, sizeof(buf), "%d,%zu,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                    slot.t, l + 1, slot.agent_ids[i], b.mean.x, b.mean.y, b.cov_xx,
                    b.cov_xy, b.cov_yy);
      out << run_id << ',' << method << ',' << buf;
    }
  }
}

}  // namespace fcpmp::eng
