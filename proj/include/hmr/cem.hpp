#pragma once

#include "hmr/experts.hpp"
#include "hmr/rng.hpp"
#include "hmr/tensor.hpp"

#include <string>
#include <vector>

namespace hmr {

/// Frozen text-encoder stub: the prompt bytes seed a PRNG that draws d_t
/// Gaussian coordinates, L2-normalized. Identical strings always map to
/// identical vectors; nothing here ever joins the tape.
struct PromptEmbedding {
  std::string text;
  Tensor vector;  // unit norm, [d_t]
};

PromptEmbedding embed_prompt(const std::string& text, int dim = 32);

/// Learnable projection into the shared space: one linear map, then L2
/// normalization. Zero inputs return a zero vector and set the flag.
struct ProjectionHead {
  Tensor w;  // [in, shared]

  ProjectionHead() = default;
  ProjectionHead(int in_dim, int shared_dim, Rng& rng);
};

struct Projected {
  Tensor vector;
  bool degenerate = false;
};

Projected project(Tape& tape, const Tensor& input, const ProjectionHead& head);

/// S[r][m] = dot(vs[r], ts[m]). Both sides stay differentiable; freezing a
/// side is a matter of passing detached vectors.
Tensor similarity(Tape& tape, const std::vector<Tensor>& visual, const std::vector<Tensor>& textual);

struct Assignment {
  std::vector<int> prompt_for_ru;  // injective map, size R
  double total = 0;                // sum of assigned scores, ascending-r order
};

/// Maximum-score one-to-one assignment for an R x M score matrix, R <= M.
/// Rectangular inputs are square-padded with -1e6; ties resolve to the
/// lexicographically smallest optimal assignment.
Assignment hungarian(const Tensor& scores);

/// RUs in index order each take their best still-unclaimed prompt.
Assignment greedy_top1_baseline(const Tensor& scores);

/// -sum_r S[r][pi(r)] with the matching held constant for the step.
Tensor alignment_loss(Tape& tape, const Tensor& scores, const Assignment& assignment);

struct PromptHit {
  int ru_slot;
  int prompt;
  double score;
};

/// Per active RU, the best prompt by score; hits below threshold are dropped.
std::vector<PromptHit> best_prompt_per_ru(const Tensor& score_values, double threshold);

}  // namespace hmr
