#pragma once

#include "cem/diff/expr.hpp"

#include <array>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cem {

using diff::Expr;
using diff::Index;
using diff::IndexList;
using diff::Tensor;

enum class ShapeTag : int { Circle = 0, Cross = 1, Square = 2 };
inline constexpr int kShapeCount = 3;
// position(2) color(3) shape one-hot(3) time index(1)
inline constexpr int kEntityFeatures = 2 + 3 + kShapeCount + 1;
inline constexpr double kPositionBound = 1.5;
inline constexpr double kMaskLogit = 6.0;

struct EntityState {
  std::array<double, 2> pos{};
  std::array<double, 3> color{};
  int shape = 0;
  bool operator==(const EntityState&) const = default;
};

using State = std::vector<EntityState>;

class EventError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// A trajectory of T states over the same N entities, plus its ground-truth attention.
struct Event {
  std::vector<State> states;
  std::vector<int> mask;  // 0/1 per entity; may be empty for unlabeled events

  int steps() const { return static_cast<int>(states.size()); }
  int entities() const { return states.empty() ? 0 : static_cast<int>(states.front().size()); }
  void validate() const;
  bool operator==(const Event&) const = default;
};

// Mask -> attention logits (+-kMaskLogit).
std::vector<double> mask_logits(std::span<const int> mask);

// Part of an event that a branch of the energy sees, and which frames of that part are
// optimized by generation.
struct EventView {
  std::vector<State> frames;
  int first_free_frame = 0;
};

// Two-state events: the generation branch sees x1, identification sees x0.
// Longer trajectories are seen whole (motion is the concept); generation frees x1.. .
EventView generation_view(const Event& e);
EventView identification_view(const Event& e);

// Flattened entity rows for a batch of event views together with the index structure
// of the pairwise relation sum. Rows are ordered (event, frame, entity).
class SceneBatch {
 public:
  // Adds a view whose energy uses row `code_row` of the code matrix. Returns its index.
  // `origin` (default: the view's first frame) seeds free rows when sampling starts.
  int add(const EventView& view, int code_row, const State* origin = nullptr);

  Index rows() const { return static_cast<Index>(row_event_.size()); }
  Index events() const { return static_cast<Index>(event_entities_.size()); }
  Index attention_rows() const { return attention_rows_; }
  int code_rows() const { return code_rows_; }
  int entities(int event) const { return event_entities_[static_cast<std::size_t>(event)]; }
  Index attention_offset(int event) const { return event_attention_offset_[static_cast<std::size_t>(event)]; }

  const Tensor& positions() const { return cache().positions; }
  const Tensor& colors() const { return cache().colors; }
  // shape one-hot and time index, rows x 4
  const Tensor& static_features() const { return cache().statics; }

  // Rows belonging to free (generated) frames.
  const IndexList& free_rows() const { return cache().free_rows; }
  Index free_row_count() const { return static_cast<Index>(free_rows_.size()); }
  // Origin-state values of the free rows, free_row_count x 2 and x 3.
  const Tensor& free_origin_positions() const { return cache().origin_positions; }
  const Tensor& free_origin_colors() const { return cache().origin_colors; }
  const IndexList& row_attention() const { return cache().row_attention; }
  const IndexList& row_event() const { return cache().row_event; }
  const IndexList& row_code() const { return cache().row_code; }
  const IndexList& event_code() const { return cache().event_code; }
  const IndexList& pair_first() const { return cache().pair_i; }
  const IndexList& pair_second() const { return cache().pair_j; }
  const IndexList& pair_first_attention() const { return cache().pair_ai; }
  const IndexList& pair_second_attention() const { return cache().pair_aj; }
  const IndexList& pair_event() const { return cache().pair_event; }
  const IndexList& pair_code() const { return cache().pair_code; }
  // 1 / (N^2 T) per pair and 1 / (N T) per row.
  const Tensor& pair_norm() const { return cache().pair_norm; }
  const Tensor& row_norm() const { return cache().row_norm; }

 private:
  struct Cache {
    Tensor positions, colors, statics, pair_norm, row_norm, origin_positions, origin_colors;
    IndexList free_rows, row_attention, row_event, row_code, event_code;
    IndexList pair_i, pair_j, pair_ai, pair_aj, pair_event, pair_code;
  };
  const Cache& cache() const;

  std::vector<EntityState> entity_;
  std::vector<EntityState> free_origin_;
  std::vector<double> time_;
  std::vector<Index> row_event_, row_attention_, free_rows_;
  std::vector<double> row_norm_;
  std::vector<Index> pair_i_, pair_j_, pair_ai_, pair_aj_, pair_event_;
  std::vector<double> pair_norm_;
  std::vector<Index> event_code_;
  std::vector<int> event_entities_;
  std::vector<Index> event_attention_offset_;
  Index attention_rows_ = 0;
  int code_rows_ = 0;
  mutable std::shared_ptr<const Cache> cache_;
};

}  // namespace cem
