#include "hysparse/selection.hpp"

#include <algorithm>
#include <numeric>
#include <string>

namespace hysparse {

BlockIndexSet::BlockIndexSet(std::size_t rows, std::size_t groups, int k_blocks, int block_size,
                             std::int64_t first_position)
    : rows_(rows),
      groups_(groups),
      k_blocks_(k_blocks),
      block_size_(block_size),
      first_position_(first_position),
      sets_(rows * groups) {
  if (block_size < 1) throw ConfigError("BlockIndexSet: block_size must be >= 1");
  if (k_blocks < 1) throw ConfigError("BlockIndexSet: k_blocks must be >= 1");
}

void BlockIndexSet::validate() const {
  for (std::size_t r = 0; r < rows_; ++r) {
    const std::int64_t pos = first_position_ + static_cast<std::int64_t>(r);
    for (std::size_t g = 0; g < groups_; ++g) {
      const auto set = at(r, g);
      if (set.size() > static_cast<std::size_t>(k_blocks_))
        throw SelectionError("index set row " + std::to_string(pos) + " exceeds k_blocks");
      for (std::size_t n = 0; n < set.size(); ++n) {
        if (set[n] < 0 || (n > 0 && set[n] <= set[n - 1]))
          throw SelectionError("index set row " + std::to_string(pos) + " not strictly ascending");
        if (static_cast<std::int64_t>(set[n]) * block_size_ > pos)
          throw SelectionError("index set row " + std::to_string(pos) + " selects future block " +
                               std::to_string(set[n]));
      }
    }
  }
}

BlockScores group_aggregate(const BlockScores& scores, std::size_t heads_per_group) {
  const std::size_t heads = scores.heads();
  if (heads_per_group == 0 || heads % heads_per_group != 0)
    throw ShapeError("group_aggregate: " + std::to_string(heads) + " heads not divisible into groups of " +
                     std::to_string(heads_per_group));
  const std::size_t groups = heads / heads_per_group;
  const std::size_t plane = scores.rows() * scores.blocks();
  BlockScores out;
  out.block_size = scores.block_size;
  out.first_position = scores.first_position;
  out.values = Tensor::zeros({groups, scores.rows(), scores.blocks()});
  auto dst = out.values.data();
  const auto src = scores.values.data();
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t hh = 0; hh < heads_per_group; ++hh) {
      const std::size_t h = g * heads_per_group + hh;
      for (std::size_t n = 0; n < plane; ++n) {
        double& d = dst[g * plane + n];
        d = hh == 0 ? src[h * plane + n] : std::max(d, src[h * plane + n]);
      }
    }
  return out;
}

BlockIndexSet topk_blocks(const BlockScores& group_scores, int k_blocks) {
  const std::size_t groups = group_scores.heads();
  const std::size_t rows = group_scores.rows();
  const std::size_t nb = group_scores.blocks();
  const std::int64_t bs = group_scores.block_size;
  BlockIndexSet out(rows, groups, k_blocks, group_scores.block_size, group_scores.first_position);
  std::vector<std::int32_t> order;
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t r = 0; r < rows; ++r) {
      const std::int64_t pos = group_scores.first_position + static_cast<std::int64_t>(r);
      const std::size_t available = std::min<std::size_t>(nb, static_cast<std::size_t>(pos / bs + 1));
      order.resize(available);
      std::iota(order.begin(), order.end(), 0);
      const std::size_t take = std::min<std::size_t>(available, static_cast<std::size_t>(k_blocks));
      auto better = [&](std::int32_t a, std::int32_t b) {
        const double sa = group_scores.at(g, r, static_cast<std::size_t>(a));
        const double sb = group_scores.at(g, r, static_cast<std::size_t>(b));
        return sa > sb || (sa == sb && a < b);
      };
      std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(), better);
      auto& set = out.mutable_at(r, g);
      set.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take));
      std::sort(set.begin(), set.end());
    }
  return out;
}

double selection_recall(std::span<const std::int32_t> oracle, std::span<const std::int32_t> candidate) {
  std::vector<std::int32_t> a(oracle.begin(), oracle.end());
  std::vector<std::int32_t> b(candidate.begin(), candidate.end());
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  if (a.empty()) return 1.0;
  std::sort(b.begin(), b.end());
  b.erase(std::unique(b.begin(), b.end()), b.end());
  std::vector<std::int32_t> common;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(common));
  return static_cast<double>(common.size()) / static_cast<double>(a.size());
}

nlohmann::json to_json(const BlockIndexSet& indices) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < indices.rows(); ++r) {
    nlohmann::json groups = nlohmann::json::array();
    for (std::size_t g = 0; g < indices.groups(); ++g) {
      const auto set = indices.at(r, g);
      groups.push_back(std::vector<std::int32_t>(set.begin(), set.end()));
    }
    rows.push_back({{"groups", std::move(groups)},
                    {"position", indices.first_position() + static_cast<std::int64_t>(r)}});
  }
  return {{"block_size", indices.block_size()}, {"k_blocks", indices.k_blocks()}, {"rows", std::move(rows)}};
}

BlockIndexSet index_set_from_json(const nlohmann::json& j) {
  const auto& rows = j.at("rows");
  const std::size_t groups = rows.empty() ? 0 : rows.at(0).at("groups").size();
  const std::int64_t first = rows.empty() ? 0 : rows.at(0).at("position").get<std::int64_t>();
  BlockIndexSet out(rows.size(), groups, j.at("k_blocks").get<int>(), j.at("block_size").get<int>(), first);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].at("position").get<std::int64_t>() != first + static_cast<std::int64_t>(r))
      throw Error("index_set_from_json: rows must be consecutive positions");
    for (std::size_t g = 0; g < groups; ++g)
      out.mutable_at(r, g) = rows[r].at("groups").at(g).get<std::vector<std::int32_t>>();
  }
  out.validate();
  return out;
}

}  // namespace hysparse
