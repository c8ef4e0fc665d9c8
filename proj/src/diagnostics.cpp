#include "enkf/diagnostics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>

#include <Eigen/QR>

#include "enkf/errors.hpp"
#include "enkf/parallel.hpp"

namespace enkf {

namespace {

// Subdivides the stream-tag space of the concentration experiment.
std::uint64_t cell_key(std::uint64_t seed, std::size_t cond_index, Index K) {
  return substream_key(seed, StreamTag::kConcentration, 1000003ULL * cond_index + static_cast<std::uint64_t>(K));
}

Matrix random_orthonormal(CounterRng& rng, Index d, Index p) {
  Eigen::HouseholderQR<Matrix> qr(rng.normal_matrix(d, p));
  return qr.householderQ() * Matrix::Identity(d, p);
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  const double w = pos - static_cast<double>(lo);
  return (1 - w) * v[lo] + w * v[hi];
}

}  // namespace

LambdaMu compute_lambda_mu(const SymMatrix& c_hat_taurho, const Matrix& A, const SymMatrix& c_prev,
                           const SymMatrix& sigma_plus, double r, double tau, double rho) {
  const SymMatrix mean_part = c_prev.congruence(A) * r + sigma_plus * r;
  LambdaMu out;
  out.lambda = std::max(1.0, loewner_ratio(c_hat_taurho, mean_part.plus_identity(r * tau * rho)));
  // [C_hat]^{-1} <= mu [M]^{-1}  <=>  M <= mu C_hat.
  out.mu = std::max(1.0, loewner_ratio(mean_part.plus_identity(tau * rho), c_hat_taurho));
  return out;
}

double compute_nu(const SymMatrix& c, const SymMatrix& r_ref) { return std::max(1.0, loewner_ratio(c, r_ref)); }

FilterRun run_filter(const FilterSetup& setup, std::uint64_t seed, const Vector* shift) {
  const CoefficientStream& stream = setup.stream;
  const EnkfConfig& cfg = setup.cfg;
  const Index d = stream.dim();
  cfg.validate(d);
  if (setup.T < 1) throw InvalidParams("T must be >= 1");
  const Vector m0 = setup.init_mean.size() ? setup.init_mean : Vector::Zero(d);
  if (m0.size() != d) throw DimensionMismatch("run_filter: init_mean has wrong length");

  CounterRng x0_rng(substream_key(seed, StreamTag::kInitialEnsemble, 1, 0));
  const double sd0 = std::sqrt(setup.init_var);
  const Vector x0 = m0 + sd0 * x0_rng.normal_vector(d);
  const TruthTrajectory truth = simulate_truth(stream, x0, setup.T, seed);

  // Member draws come from substreams disjoint from the truth start above.
  const GaussianFactor init_cov = GaussianFactor::from_diagonal(Vector::Constant(d, setup.init_var));
  Ensemble ens = initial_ensemble(shift ? Vector(m0 + *shift) : m0, init_cov, cfg.K, seed);

  std::optional<GaussianFactor> fixed_plus;
  if (stream.time_homogeneous()) fixed_plus = instability_factor(stream.at(0), cfg.r, cfg.tau, cfg.rho);

  AugmentedRiccatiState ref_state;
  if (setup.compute_diagnostics && !setup.reference) {
    ref_state.cov = SymMatrix::identity(d, setup.init_var);
    ref_state.r = cfg.r;
    ref_state.tau = cfg.tau;
    ref_state.rho = cfg.rho;
  }

  FilterRun run;
  run.seed = seed;
  run.l2_errors.reserve(static_cast<std::size_t>(setup.T));
  if (setup.keep_trajectories) {
    run.posterior_means.push_back(ens.mean);
    run.spreads.push_back(ens.spread);
    run.truth.push_back(truth.states[0]);
  }

  for (std::uint64_t n = 0; n < setup.T; ++n) {
    const StepCoefficients c = stream.at(n);
    const GaussianFactor plus = fixed_plus ? *fixed_plus : instability_factor(c, cfg.r, cfg.tau, cfg.rho);
    const SymMatrix c_prev = setup.compute_diagnostics ? ens.covariance() : SymMatrix();
    const Forecast fc = enkf_forecast(ens, c, plus, cfg, seed, n);
    auto [post, rec] = enkf_assimilate(fc, c, truth.observations[static_cast<std::size_t>(n)], cfg);
    ens = std::move(post);

    const Vector& xt = truth.states[static_cast<std::size_t>(n + 1)];
    const Vector e = ens.mean - xt;
    run.l2_errors.push_back(e.norm());

    if (setup.compute_diagnostics) {
      FilterDiagnostics fd;
      fd.step = n + 1;
      fd.l2_error = e.norm();
      const SymMatrix cn = ens.covariance();
      fd.maha_sq_per_d = mahalanobis_sq(e, cn.plus_identity(cfg.rho)) / static_cast<double>(d);
      const SymMatrix c_hat =
          SymMatrix(fc.spread * fc.spread.transpose() / static_cast<double>(cfg.K - 1)).plus_identity(cfg.tau * cfg.rho);
      const LambdaMu lm =
          compute_lambda_mu(c_hat, Matrix(c.A), c_prev, plus.covariance(), cfg.r, cfg.tau, cfg.rho);
      fd.lambda = lm.lambda;
      fd.mu = lm.mu;
      fd.chi = rec.chi;
      SymMatrix ref;
      if (setup.reference) {
        ref = *setup.reference;
      } else {
        ref_state = augmented_riccati_step(ref_state, c);
        ref = ref_state.cov;
      }
      fd.cov_fidelity = loewner_ratio(cn, ref);
      fd.nu = std::max(1.0, fd.cov_fidelity);
      run.diagnostics.push_back(fd);
    }
    if (setup.keep_trajectories) {
      run.posterior_means.push_back(ens.mean);
      run.spreads.push_back(ens.spread);
      run.truth.push_back(xt);
    }
  }
  return run;
}

SeriesStats aggregate_series(const std::vector<FilterRun>& runs) {
  SeriesStats st;
  if (runs.empty()) return st;
  const std::size_t T = runs.front().diagnostics.size();
  using Field = double FilterDiagnostics::*;
  const Field fields[] = {&FilterDiagnostics::maha_sq_per_d, &FilterDiagnostics::l2_error, &FilterDiagnostics::nu,
                          &FilterDiagnostics::lambda,        &FilterDiagnostics::mu,       &FilterDiagnostics::chi,
                          &FilterDiagnostics::cov_fidelity};
  st.mean.resize(T);
  st.q10.resize(T);
  st.q50.resize(T);
  st.q90.resize(T);
  std::vector<double> vals(runs.size());
  for (std::size_t n = 0; n < T; ++n) {
    const std::uint64_t step = runs.front().diagnostics[n].step;
    st.mean[n].step = st.q10[n].step = st.q50[n].step = st.q90[n].step = step;
    for (Field f : fields) {
      double sum = 0;
      for (std::size_t s = 0; s < runs.size(); ++s) {
        vals[s] = runs[s].diagnostics.at(n).*f;
        sum += vals[s];
      }
      st.mean[n].*f = sum / static_cast<double>(runs.size());
      st.q10[n].*f = quantile(vals, 0.1);
      st.q50[n].*f = quantile(vals, 0.5);
      st.q90[n].*f = quantile(vals, 0.9);
    }
  }
  return st;
}

FilterExperimentResult run_filter_experiment(const FilterSetup& setup, const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw InvalidParams("run_filter_experiment: no seeds");
  FilterExperimentResult out;
  out.runs.resize(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) { out.runs[i] = run_filter(setup, seeds[i]); });
  if (setup.compute_diagnostics) out.stats = aggregate_series(out.runs);
  return out;
}

LambdaMu concentration_ratios(const Matrix& a, const Matrix& xi, const SymMatrix& sigma, double rho,
                              bool complement) {
  const Index K = a.cols();
  if (xi.rows() != a.rows() || xi.cols() != K || sigma.dim() != a.rows())
    throw DimensionMismatch("concentration_ratios: shape mismatch");
  if (K < 2) throw InvalidParams("concentration_ratios: K must be >= 2");
  const double k1 = static_cast<double>(K - 1);
  const Matrix dxi = xi.colwise() - xi.rowwise().mean();
  const Matrix s = a + dxi;
  const SymMatrix z(s * s.transpose() / k1);
  const SymMatrix d_rho = (SymMatrix(a * a.transpose() / k1) + sigma).plus_identity(rho);
  LambdaMu out;
  out.lambda = loewner_ratio(z, d_rho);
  out.mu = loewner_ratio(d_rho, z.plus_identity(rho));
  if (complement) {
    out.lambda = std::max(out.lambda, 0.0);
    out.mu = std::max(out.mu, 1.0);
  }
  return out;
}

ConcentrationResult run_concentration_experiment(const ConcentrationOptions& o) {
  if (o.p < 1 || o.d < 1 || o.p > o.d) throw InvalidParams("concentration: need 1 <= p <= d");
  if (o.trials < 1) throw InvalidParams("concentration: trials must be >= 1");
  if (o.K_list.empty()) throw InvalidParams("concentration: K_list is empty");
  for (double c : o.condition_numbers)
    if (!(c > 1)) throw InvalidParams("concentration: condition numbers must be > 1");
  if (!(o.rho > 0)) throw InvalidParams("concentration: rho must be > 0");

  std::vector<Index> ks = o.K_list;
  const bool tail_extra = std::find(ks.begin(), ks.end(), o.tail_K) == ks.end();
  if (tail_extra) ks.push_back(o.tail_K);

  ConcentrationResult res;
  std::vector<double> tail_lambdas;
  const double threshold = 1.0 + 5.0 * o.delta;

  for (std::size_t ci = 0; ci < o.condition_numbers.size(); ++ci) {
    const double cond = o.condition_numbers[ci];
    // Fixed geometry per condition number: signal subspace V and noise subspace W.
    CounterRng geo(substream_key(o.seed, StreamTag::kConcentration, 0, ci));
    const Matrix V = random_orthonormal(geo, o.d, o.p);
    const Matrix W = random_orthonormal(geo, o.d, o.p);
    Matrix vw(o.d, 2 * o.p);
    vw << V, W;
    Eigen::ColPivHouseholderQR<Matrix> qr(vw);
    const Index m = qr.rank();
    const Matrix U = qr.householderQ() * Matrix::Identity(o.d, m);
    const Matrix Vr = U.transpose() * V;
    const Matrix Wr = U.transpose() * W;
    const SymMatrix sigma_r(Wr * Wr.transpose());  // Sigma = W W^T, unit spectrum on span W
    const bool complement = m < o.d;

    for (Index K : ks) {
      if (K < 2) throw InvalidParams("concentration: every K must be >= 2");
      CounterRng arng(cell_key(o.seed, ci, K));
      Matrix g = arng.normal_matrix(o.p, K);
      // Scale a_k so the condition number of C + rho I equals `cond`.
      const Matrix c_small = g * g.transpose() / static_cast<double>(K - 1);
      const double top = max_eigenvalue(SymMatrix(c_small));
      g *= std::sqrt((cond - 1.0) * o.rho / top);
      const Matrix ar = Vr * g;

      std::vector<ConcentrationTrial> trials(static_cast<std::size_t>(o.trials));
      parallel_for(trials.size(), [&](std::size_t t) {
        CounterRng rng(substream_key(cell_key(o.seed, ci, K), StreamTag::kTestData, t + 1));
        const Matrix xi = Wr * rng.normal_matrix(o.p, K);
        const LambdaMu lm = concentration_ratios(ar, xi, sigma_r, o.rho, complement);
        ConcentrationTrial& tr = trials[t];
        tr.d = o.d;
        tr.p = o.p;
        tr.K = K;
        tr.condition_number = cond;
        tr.rho = o.rho;
        tr.delta = o.delta;
        tr.lambda = lm.lambda;
        tr.mu = lm.mu;
        tr.in_rare_event = lm.lambda > threshold || lm.mu > threshold;
      });

      std::vector<double> lam, mu;
      int rare = 0;
      for (const auto& tr : trials) {
        lam.push_back(tr.lambda);
        mu.push_back(tr.mu);
        rare += tr.in_rare_event ? 1 : 0;
      }
      const bool listed = std::find(o.K_list.begin(), o.K_list.end(), K) != o.K_list.end();
      if (listed) {
        ConcentrationRow row;
        row.K = K;
        row.condition_number = cond;
        row.rare_event_freq = static_cast<double>(rare) / static_cast<double>(o.trials);
        row.lambda_median = quantile(lam, 0.5);
        row.mu_median = quantile(mu, 0.5);
        res.rows.push_back(row);
        res.trials.insert(res.trials.end(), trials.begin(), trials.end());
      }
      if (ci == 0 && K == o.tail_K) tail_lambdas = lam;
    }
  }

  int pairs = 0, good = 0;
  for (std::size_t i = 0; i + 1 < res.rows.size(); ++i) {
    if (res.rows[i].condition_number != res.rows[i + 1].condition_number) continue;
    ++pairs;
    if (res.rows[i + 1].rare_event_freq <= res.rows[i].rare_event_freq) ++good;
  }
  res.monotone_fraction = pairs ? static_cast<double>(good) / pairs : 1.0;

  // Exceedance curve above the median; thresholds expressed as 8 + t.
  if (!tail_lambdas.empty()) {
    std::vector<double> sorted = tail_lambdas;
    std::sort(sorted.begin(), sorted.end());
    const double lo = quantile(sorted, 0.5);
    const double hi = sorted.back();
    const int npts = std::max(2, o.tail_points);
    std::vector<double> xs, ys;
    for (int i = 0; i < npts; ++i) {
      const double th = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(npts);
      const auto count = static_cast<int>(sorted.end() - std::upper_bound(sorted.begin(), sorted.end(), th));
      TailPoint tp;
      tp.t = th - 8.0;
      tp.count = count;
      tp.prob = static_cast<double>(count) / static_cast<double>(sorted.size());
      res.tail.push_back(tp);
      if (count >= o.tail_min_count) {
        xs.push_back(tp.t);
        ys.push_back(std::log(tp.prob));
      }
    }
    res.tail_fit = fit_line(xs, ys);
  }
  return res;
}

LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  LinearFit f;
  f.points = static_cast<int>(x.size());
  if (x.size() != y.size()) throw DimensionMismatch("fit_line: length mismatch");
  if (x.size() < 2) {
    f.slope = f.intercept = f.r2 = std::numeric_limits<double>::quiet_NaN();
    return f;
  }
  const double n = static_cast<double>(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  f.slope = sxx > 0 ? sxy / sxx : std::numeric_limits<double>::quiet_NaN();
  f.intercept = my - f.slope * mx;
  f.r2 = (sxx > 0 && syy > 0) ? (sxy * sxy) / (sxx * syy) : (syy == 0 ? 1.0 : 0.0);
  return f;
}

StabilityResult run_stability_experiment(const FilterSetup& setup, const std::vector<double>& shift_magnitudes,
                                         const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw InvalidParams("run_stability_experiment: no seeds");
  FilterSetup s = setup;
  s.keep_trajectories = true;
  s.compute_diagnostics = false;
  const Index d = s.stream.dim();
  const double floor = 1e3 * std::numeric_limits<double>::epsilon();

  std::vector<std::vector<StabilityFit>> per_seed(seeds.size());
  parallel_for(seeds.size(), [&](std::size_t i) {
    const FilterRun base = run_filter(s, seeds[i]);
    for (double mag : shift_magnitudes) {
      const Vector shift = Vector::Unit(d, 0) * mag;
      const FilterRun moved = run_filter(s, seeds[i], &shift);
      StabilityFit fit;
      fit.shift = mag;
      fit.seed = seeds[i];
      std::vector<double> xs, ys;
      for (std::size_t n = 0; n < base.posterior_means.size(); ++n) {
        const double g = (base.posterior_means[n] - moved.posterior_means[n]).norm();
        fit.gap.push_back(g);
        if (g > floor) {
          xs.push_back(static_cast<double>(n));
          ys.push_back(std::log(g));
        }
        if (!(base.spreads[n].array() == moved.spreads[n].array()).all()) fit.spreads_identical = false;
      }
      fit.fit = fit_line(xs, ys);
      per_seed[i].push_back(std::move(fit));
    }
  });

  StabilityResult res;
  int counted = 0, negative = 0;
  for (auto& v : per_seed)
    for (auto& f : v) {
      res.all_spreads_identical = res.all_spreads_identical && f.spreads_identical;
      if (f.shift != 0.0) {
        ++counted;
        if (f.fit.points >= 2 && f.fit.slope < 0) ++negative;
      }
      res.fits.push_back(std::move(f));
    }
  res.negative_slope_fraction = counted ? static_cast<double>(negative) / counted : 1.0;
  return res;
}

CoefficientStream scale_noise(const CoefficientStream& stream, double eps) {
  if (!(eps > 0)) throw InvalidParams("scale_noise: eps must be > 0");
  auto base = std::make_shared<CoefficientStream>(stream);
  auto gen = [base, eps](std::uint64_t step) {
    StepCoefficients c = base->at(step);
    c.Sigma *= eps * eps;
    c.H /= eps;
    return c;
  };
  CoefficientStream out(stream.dim(), stream.obs_dim(), gen, stream.time_homogeneous());
  std::vector<int> map(static_cast<std::size_t>(stream.dim()));
  for (Index i = 0; i < stream.dim(); ++i) map[static_cast<std::size_t>(i)] = stream.mode_of_component(i);
  out.set_mode_map(std::move(map));
  return out;
}

std::vector<AccuracyRow> run_accuracy_experiment(const FilterSetup& setup, const std::vector<double>& eps_list,
                                                 const std::vector<std::uint64_t>& seeds) {
  if (eps_list.empty()) throw InvalidParams("run_accuracy_experiment: empty eps list");
  if (seeds.empty()) throw InvalidParams("run_accuracy_experiment: no seeds");
  std::vector<AccuracyRow> rows;
  for (double eps : eps_list) {
    if (!(eps > 0)) throw InvalidParams("run_accuracy_experiment: eps must be > 0");
    FilterSetup s(scale_noise(setup.stream, eps));
    s.cfg = setup.cfg;
    s.cfg.rho *= eps * eps;
    s.T = setup.T;
    s.init_mean = setup.init_mean.size() ? Vector(setup.init_mean * eps) : Vector();
    s.init_var = setup.init_var * eps * eps;
    s.compute_diagnostics = false;
    s.keep_trajectories = false;

    AccuracyRow row;
    row.eps = eps;
    row.per_seed.resize(seeds.size());
    parallel_for(seeds.size(), [&](std::size_t i) {
      const FilterRun run = run_filter(s, seeds[i]);
      const std::size_t start = run.l2_errors.size() / 2;
      double sum = 0;
      for (std::size_t n = start; n < run.l2_errors.size(); ++n) sum += run.l2_errors[n];
      row.per_seed[i] = sum / static_cast<double>(run.l2_errors.size() - start);
    });
    double total = 0;
    for (double v : row.per_seed) total += v;
    row.mean_error = total / static_cast<double>(seeds.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, 17);
  return std::string(buf, res.ptr);
}

void write_csv(const std::vector<FilterDiagnostics>& series, const std::string& path,
               const std::vector<std::string>& comments) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  for (const auto& c : comments) out << "# " << c << '\n';
  out << "step,maha_sq_per_d,l2_error,nu,lambda,mu,chi,cov_fidelity\n";
  for (const auto& r : series) {
    out << r.step << ',' << format_double(r.maha_sq_per_d) << ',' << format_double(r.l2_error) << ','
        << format_double(r.nu) << ',' << format_double(r.lambda) << ',' << format_double(r.mu) << ','
        << format_double(r.chi) << ',' << format_double(r.cov_fidelity) << '\n';
  }
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace enkf
