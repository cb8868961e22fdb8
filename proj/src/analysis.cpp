// SPDX-License-Identifier: Apache-2.0
#include "repr/analysis.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <ostream>

#include "repr/errors.hpp"

namespace repr {

std::string to_string(CorrelationMethod method) { return method == CorrelationMethod::Pearson ? "pearson" : "cca"; }

CorrelationMethod parse_correlation_method(const std::string& name) {
  if (name == "pearson") return CorrelationMethod::Pearson;
  if (name == "cca") return CorrelationMethod::Cca;
  throw ConfigError("unknown correlation method '" + name + "' (expected pearson or cca)");
}

namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// maps[f] is [N, h*w] for filter f (global index).
std::vector<Matrix> collect_maps(const Model& model, const PruneMask& mask, const ProbeSet& probe,
                                 const CorrelationOptions& opt, std::vector<FilterId>& ids) {
  const std::size_t N = probe.size();
  std::vector<Matrix> maps;
  for (std::size_t l = 0; l < model.layer_count(); ++l) {
    const std::size_t hw = model.out_height(l) * model.out_width(l);
    for (std::size_t j = 0; j < model.conv_layers[l].filters(); ++j) {
      ids.push_back({l, j});
      maps.emplace_back(Matrix::Zero(static_cast<Eigen::Index>(N), static_cast<Eigen::Index>(hw)));
    }
  }
  for (std::size_t first = 0; first < N; first += opt.batch_size) {
    const std::size_t count = std::min(opt.batch_size, N - first);
    const Tensor x = slice_rows(probe.inputs, first, count);
    const ForwardResult fwd = forward(model, mask, x, Mode::Eval);
    std::size_t g = 0;
    for (std::size_t l = 0; l < model.layer_count(); ++l) {
      const Tensor& a = opt.pre_activation ? fwd.cache.layers[l].pre_activation : fwd.cache.layers[l].post_activation;
      const std::size_t J = a.dim(1);
      const std::size_t hw = a.dim(2) * a.dim(3);
      for (std::size_t j = 0; j < J; ++j, ++g) {
        for (std::size_t b = 0; b < count; ++b) {
          const double* src = a.data().data() + (b * J + j) * hw;
          for (std::size_t s = 0; s < hw; ++s)
            maps[g](static_cast<Eigen::Index>(first + b), static_cast<Eigen::Index>(s)) = src[s];
        }
      }
    }
  }
  return maps;
}

double pearson_unchecked(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  const Eigen::VectorXd xc = x.array() - x.mean();
  const Eigen::VectorXd yc = y.array() - y.mean();
  const double sx = xc.norm();
  const double sy = yc.norm();
  if (sx == 0.0 || sy == 0.0) return 0.0;
  return std::clamp(xc.dot(yc) / (sx * sy), -1.0, 1.0);
}

} // namespace

CorrelationReport activation_correlation(const Model& model, const PruneMask& mask, const ProbeSet& probe,
                                         const CorrelationOptions& opt) {
  if (probe.size() == 0) throw ConfigError("activation correlation needs a non-empty probe set");
  if (opt.batch_size < 1) throw ConfigError("batch size must be >= 1");
  mask.validate(model);

  CorrelationReport rep;
  rep.method = opt.method;
  rep.pre_activation = opt.pre_activation;
  const auto maps = collect_maps(model, mask, probe, opt, rep.filters);
  const std::size_t F = maps.size();
  for (std::size_t g = 0; g < F; ++g)
    if (rep.filters[g].filter == 0) rep.layer_starts.push_back(g);

  rep.constant.assign(F, false);
  for (std::size_t g = 0; g < F; ++g) {
    const Matrix centred = maps[g].rowwise() - maps[g].colwise().mean();
    rep.constant[g] = centred.norm() == 0.0;
  }
  if (opt.method == CorrelationMethod::Pearson) {
    // Constancy of the spatial mean signature is what matters here.
    for (std::size_t g = 0; g < F; ++g) {
      const Eigen::VectorXd sig = maps[g].rowwise().mean();
      rep.constant[g] = (sig.array() - sig.mean()).matrix().norm() == 0.0;
    }
  }

  rep.matrix = Tensor({F, F});
  if (opt.method == CorrelationMethod::Pearson) {
    std::vector<Eigen::VectorXd> sig(F);
    for (std::size_t g = 0; g < F; ++g) sig[g] = maps[g].rowwise().mean();
    for (std::size_t i = 0; i < F; ++i) {
      rep.matrix.at(i, i) = rep.constant[i] ? 0.0 : 1.0;
      for (std::size_t j = i + 1; j < F; ++j) {
        const double r = (rep.constant[i] || rep.constant[j]) ? 0.0 : pearson_unchecked(sig[i], sig[j]);
        rep.matrix.at(i, j) = r;
        rep.matrix.at(j, i) = r;
      }
    }
    return rep;
  }

  // cca: orthonormal basis of each centred column space, then the top
  // singular value of the cross product of two bases.
  std::vector<Matrix> basis(F);
  for (std::size_t g = 0; g < F; ++g) {
    if (rep.constant[g]) continue;
    const Matrix centred = maps[g].rowwise() - maps[g].colwise().mean();
    Eigen::JacobiSVD<Matrix> svd(centred, Eigen::ComputeThinU);
    const auto& s = svd.singularValues();
    Eigen::Index r = 0;
    while (r < s.size() && s(r) > opt.rank_tolerance * s(0)) ++r;
    basis[g] = svd.matrixU().leftCols(r);
  }
  for (std::size_t i = 0; i < F; ++i) {
    rep.matrix.at(i, i) = rep.constant[i] ? 0.0 : 1.0;
    for (std::size_t j = i + 1; j < F; ++j) {
      double r = 0.0;
      if (!rep.constant[i] && !rep.constant[j]) {
        const Matrix cross = basis[i].transpose() * basis[j];
        Eigen::JacobiSVD<Matrix> svd(cross);
        r = std::min(1.0, svd.singularValues()(0));
      }
      rep.matrix.at(i, j) = r;
      rep.matrix.at(j, i) = r;
    }
  }
  return rep;
}

void write_correlation_csv(std::ostream& os, const CorrelationReport& rep) {
  auto label = [](const FilterId& id) { return std::to_string(id.layer) + ":" + std::to_string(id.filter); };
  os << to_string(rep.method);
  for (const auto& id : rep.filters) os << ',' << label(id);
  os << '\n';
  char buf[64];
  for (std::size_t i = 0; i < rep.filters.size(); ++i) {
    os << label(rep.filters[i]);
    for (std::size_t j = 0; j < rep.filters.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", rep.matrix.at(i, j));
      os << ',' << buf;
    }
    os << '\n';
  }
}

double pearson(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ConfigError("pearson needs equally long inputs");
  if (x.size() < 2) throw ConfigError("correlation is undefined for fewer than 2 points");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ConfigError("spearman needs equally long inputs");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  return pearson(rx, ry);
}

Agreement metric_agreement(const std::vector<RankingScore>& a, const std::vector<RankingScore>& b) {
  std::map<FilterId, double> bm;
  for (const auto& s : b) {
    if (!bm.emplace(s.id, s.value).second) throw ConfigError("duplicate filter in second score list");
  }
  if (a.size() != bm.size()) throw ConfigError("score lists cover different filters");
  std::vector<double> x, y;
  for (const auto& s : a) {
    auto it = bm.find(s.id);
    if (it == bm.end()) {
      throw ConfigError("filter (" + std::to_string(s.id.layer) + ", " + std::to_string(s.id.filter) +
                        ") missing from second score list");
    }
    x.push_back(s.value);
    y.push_back(it->second);
  }
  Agreement out;
  out.count = x.size();
  out.pearson = pearson(x, y);
  out.spearman = spearman(x, y);
  return out;
}

GapReport generalization_gap(const std::vector<EpochRecord>& rows, std::size_t tail) {
  GapReport out;
  for (const auto& r : rows) out.per_epoch.push_back(r.train_acc - r.test_acc);
  const std::size_t k = std::min(std::max<std::size_t>(tail, 1), out.per_epoch.size());
  if (k > 0) {
    out.tail_mean =
        std::accumulate(out.per_epoch.end() - static_cast<std::ptrdiff_t>(k), out.per_epoch.end(), 0.0) /
        static_cast<double>(k);
  }
  return out;
}

} // namespace repr
