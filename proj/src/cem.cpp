#include "hmr/cem.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace hmr {

namespace {

constexpr double kPadScore = -1e6;

Tensor dense_init(Shape shape, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(shape[0]));
  Tensor w(shape, true);
  for (std::int64_t i = 0; i < w.size(); ++i) w.mut(i) = rng.uniform(-bound, bound);
  return w;
}

// O(n^3) assignment on a square cost matrix (minimization), potentials form.
std::vector<int> solve_square_min(const std::vector<std::vector<double>>& cost) {
  const int n = static_cast<int>(cost.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0), v(static_cast<std::size_t>(n) + 1, 0);
  std::vector<int> p(static_cast<std::size_t>(n) + 1, 0), way(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1, inf);
    std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1)][static_cast<std::size_t>(j - 1)] -
                           u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    if (p[static_cast<std::size_t>(j)] > 0)
      row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

// Best total over injections of rows into the given columns; square-pads
// with kPadScore so padding rows soak up the surplus columns.
double optimal_total(const std::vector<std::vector<double>>& scores, const std::vector<int>& cols,
                     std::vector<int>* assignment_out) {
  const int rows = static_cast<int>(scores.size());
  const int n = static_cast<int>(cols.size());
  std::vector<std::vector<double>> cost(static_cast<std::size_t>(n),
                                        std::vector<double>(static_cast<std::size_t>(n), -kPadScore));
  for (int r = 0; r < rows; ++r)
    for (int j = 0; j < n; ++j)
      cost[static_cast<std::size_t>(r)][static_cast<std::size_t>(j)] =
          -scores[static_cast<std::size_t>(r)][static_cast<std::size_t>(cols[static_cast<std::size_t>(j)])];
  std::vector<int> sol = solve_square_min(cost);
  double total = 0;
  for (int r = 0; r < rows; ++r)
    total += scores[static_cast<std::size_t>(r)]
                   [static_cast<std::size_t>(cols[static_cast<std::size_t>(sol[static_cast<std::size_t>(r)])])];
  if (assignment_out) {
    assignment_out->resize(static_cast<std::size_t>(rows));
    for (int r = 0; r < rows; ++r)
      (*assignment_out)[static_cast<std::size_t>(r)] = cols[static_cast<std::size_t>(sol[static_cast<std::size_t>(r)])];
  }
  return total;
}

std::vector<std::vector<double>> to_rows(const Tensor& scores) {
  const int r = scores.dim(0), m = scores.dim(1);
  std::vector<std::vector<double>> rows(static_cast<std::size_t>(r),
                                        std::vector<double>(static_cast<std::size_t>(m)));
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < m; ++j) rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = scores.at(i, j);
  return rows;
}

void check_feasible(const Tensor& scores) {
  if (scores.rank() != 2)
    throw std::invalid_argument("assignment scores must be an RxM matrix, got " +
                                shape_str(scores.shape()));
  if (scores.dim(0) > scores.dim(1))
    throw std::invalid_argument("infeasible matching: " + std::to_string(scores.dim(0)) +
                                " regions but only " + std::to_string(scores.dim(1)) +
                                " prompts; each region must be matched to one prompt");
}

}  // namespace

PromptEmbedding embed_prompt(const std::string& text, int dim) {
  if (text.empty()) throw std::invalid_argument("embed_prompt: prompt string must be non-empty");
  Rng rng(fnv1a(text), "prompt-embed");
  Tensor v({dim});
  for (int i = 0; i < dim; ++i) v.mut(i) = rng.normal();
  const double n = std::sqrt(v.data().square().sum());
  for (int i = 0; i < dim; ++i) v.mut(i) /= n;
  return {text, v};
}

ProjectionHead::ProjectionHead(int in_dim, int shared_dim, Rng& rng)
    : w(dense_init({in_dim, shared_dim}, rng)) {}

Projected project(Tape& tape, const Tensor& input, const ProjectionHead& head) {
  if (input.size() != head.w.dim(0))
    throw std::invalid_argument("project: input extent " + shape_str(input.shape()) +
                                " does not match head " + shape_str(head.w.shape()));
  Projected out;
  out.vector = l2_normalize(tape, linear(tape, input, head.w, nullptr), &out.degenerate);
  return out;
}

Tensor similarity(Tape& tape, const std::vector<Tensor>& visual, const std::vector<Tensor>& textual) {
  if (visual.empty() || textual.empty())
    throw std::invalid_argument("similarity needs at least one vector on each side");
  const int d = static_cast<int>(visual[0].size());
  auto stack = [&](const std::vector<Tensor>& rows) {
    Tensor m = reshape(tape, rows[0], {1, d});
    for (std::size_t i = 1; i < rows.size(); ++i)
      m = concat(tape, m, reshape(tape, rows[i], {1, d}), 0);
    return m;
  };
  return matmul(tape, stack(visual), transpose2d(tape, stack(textual)));
}

Assignment hungarian(const Tensor& scores) {
  check_feasible(scores);
  const int r = scores.dim(0), m = scores.dim(1);
  auto rows = to_rows(scores);
  std::vector<int> all_cols(static_cast<std::size_t>(m));
  for (int j = 0; j < m; ++j) all_cols[static_cast<std::size_t>(j)] = j;
  const double best_total = optimal_total(rows, all_cols, nullptr);
  const double tol = 1e-9 * std::max(1.0, std::abs(best_total));

  // Fix rows in order to the smallest column that still reaches the optimum.
  Assignment out;
  out.prompt_for_ru.resize(static_cast<std::size_t>(r));
  std::vector<int> available = all_cols;
  double fixed = 0;
  for (int row = 0; row < r; ++row) {
    std::vector<std::vector<double>> rest(rows.begin() + row + 1, rows.end());
    bool placed = false;
    for (std::size_t j = 0; j < available.size() && !placed; ++j) {
      const int col = available[j];
      std::vector<int> remaining;
      for (int c : available)
        if (c != col) remaining.push_back(c);
      const double rest_total = rest.empty() ? 0.0 : optimal_total(rest, remaining, nullptr);
      if (fixed + rows[static_cast<std::size_t>(row)][static_cast<std::size_t>(col)] + rest_total >=
          best_total - tol) {
        out.prompt_for_ru[static_cast<std::size_t>(row)] = col;
        fixed += rows[static_cast<std::size_t>(row)][static_cast<std::size_t>(col)];
        available.erase(std::find(available.begin(), available.end(), col));
        placed = true;
      }
    }
    if (!placed) throw std::logic_error("hungarian: refinement failed to place a row");
  }
  out.total = 0;
  for (int row = 0; row < r; ++row)
    out.total += rows[static_cast<std::size_t>(row)][static_cast<std::size_t>(out.prompt_for_ru[static_cast<std::size_t>(row)])];
  return out;
}

Assignment greedy_top1_baseline(const Tensor& scores) {
  check_feasible(scores);
  const int r = scores.dim(0), m = scores.dim(1);
  Assignment out;
  std::vector<char> taken(static_cast<std::size_t>(m), 0);
  for (int row = 0; row < r; ++row) {
    int best = -1;
    for (int col = 0; col < m; ++col) {
      if (taken[static_cast<std::size_t>(col)]) continue;
      if (best < 0 || scores.at(row, col) > scores.at(row, best)) best = col;
    }
    taken[static_cast<std::size_t>(best)] = 1;
    out.prompt_for_ru.push_back(best);
    out.total += scores.at(row, best);
  }
  return out;
}

Tensor alignment_loss(Tape& tape, const Tensor& scores, const Assignment& assignment) {
  if (static_cast<int>(assignment.prompt_for_ru.size()) != scores.dim(0))
    throw std::invalid_argument("alignment_loss: assignment size does not match score rows");
  return neg_assigned_sum(tape, scores, assignment.prompt_for_ru);
}

std::vector<PromptHit> best_prompt_per_ru(const Tensor& score_values, double threshold) {
  if (score_values.rank() != 2) throw std::invalid_argument("best_prompt_per_ru expects RxM scores");
  std::vector<PromptHit> hits;
  for (int r = 0; r < score_values.dim(0); ++r) {
    int best = 0;
    for (int m = 1; m < score_values.dim(1); ++m)
      if (score_values.at(r, m) > score_values.at(r, best)) best = m;
    const double s = score_values.at(r, best);
    if (s > threshold) hits.push_back({r, best, s});
  }
  return hits;
}

}  // namespace hmr
