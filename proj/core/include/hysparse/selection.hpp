#pragma once

#include <cstdint>
#include <span>

#include <nlohmann/json.hpp>

#include "hysparse/blocks.hpp"

namespace hysparse {

/// Group-wise maximum of per-head scores: [heads x t x nb] -> [heads/heads_per_group x t x nb].
BlockScores group_aggregate(const BlockScores& scores, std::size_t heads_per_group);

/// Per (group, row): the k_blocks highest scoring blocks that start at or
/// before the row position, ties to the lower index, returned ascending.
/// Rows with fewer causal blocks select all of them.
BlockIndexSet topk_blocks(const BlockScores& group_scores, int k_blocks);

/// |oracle ∩ candidate| / |oracle|; 1.0 for an empty oracle.
double selection_recall(std::span<const std::int32_t> oracle, std::span<const std::int32_t> candidate);

/// {"block_size", "k_blocks", "rows": [{"position", "groups": [[...], ...]}]}
nlohmann::json to_json(const BlockIndexSet& indices);
BlockIndexSet index_set_from_json(const nlohmann::json& j);

}  // namespace hysparse
