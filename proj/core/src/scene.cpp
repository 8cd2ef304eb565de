#include "cem/scene.hpp"

#include <cmath>

namespace cem {

void Event::validate() const {
  if (states.empty()) throw EventError("event has no states");
  const std::size_t n = states.front().size();
  if (n == 0) throw EventError("event has no entities");
  for (std::size_t t = 0; t < states.size(); ++t) {
    if (states[t].size() != n)
      throw EventError("state " + std::to_string(t) + " has " + std::to_string(states[t].size()) +
                       " entities, expected " + std::to_string(n));
    for (const auto& e : states[t]) {
      for (double p : e.pos)
        if (!std::isfinite(p) || std::abs(p) > kPositionBound)
          throw EventError("entity position outside workspace bounds");
      for (double c : e.color)
        if (!(c >= 0.0 && c <= 1.0)) throw EventError("entity color outside [0,1]");
      if (e.shape < 0 || e.shape >= kShapeCount) throw EventError("unknown shape tag");
    }
  }
  if (!mask.empty()) {
    if (mask.size() != n) throw EventError("mask length does not match entity count");
    for (int m : mask)
      if (m != 0 && m != 1) throw EventError("mask entries must be 0 or 1");
  }
}

std::vector<double> mask_logits(std::span<const int> mask) {
  std::vector<double> out;
  out.reserve(mask.size());
  for (int m : mask) out.push_back(m ? kMaskLogit : -kMaskLogit);
  return out;
}

EventView generation_view(const Event& e) {
  if (e.steps() == 2) return {{e.states[1]}, 0};
  return {e.states, e.steps() > 1 ? 1 : 0};
}

EventView identification_view(const Event& e) {
  if (e.steps() == 2) return {{e.states[0]}, 1};
  return {e.states, e.steps()};
}

int SceneBatch::add(const EventView& view, int code_row, const State* origin) {
  if (view.frames.empty()) throw EventError("empty event view");
  if (code_row < 0) throw EventError("negative code row");
  const int n = static_cast<int>(view.frames.front().size());
  const int t_count = static_cast<int>(view.frames.size());
  if (n == 0) throw EventError("event view without entities");
  const State& from = origin ? *origin : view.frames.front();
  if (static_cast<int>(from.size()) != n) throw EventError("origin state differs in entity count");
  const auto event = static_cast<Index>(event_entities_.size());
  const Index att0 = attention_rows_;
  const double pn = 1.0 / (static_cast<double>(n) * n * t_count);
  const double rn = 1.0 / (static_cast<double>(n) * t_count);
  for (int t = 0; t < t_count; ++t) {
    const auto& frame = view.frames[static_cast<std::size_t>(t)];
    if (static_cast<int>(frame.size()) != n) throw EventError("frames differ in entity count");
    const auto row0 = static_cast<Index>(entity_.size());
    for (int i = 0; i < n; ++i) {
      const auto row = static_cast<Index>(entity_.size());
      entity_.push_back(frame[static_cast<std::size_t>(i)]);
      time_.push_back(static_cast<double>(t) / t_count);
      row_event_.push_back(event);
      row_attention_.push_back(att0 + i);
      row_norm_.push_back(rn);
      if (t >= view.first_free_frame) {
        free_rows_.push_back(row);
        free_origin_.push_back(from[static_cast<std::size_t>(i)]);
      }
    }
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        pair_i_.push_back(row0 + i);
        pair_j_.push_back(row0 + j);
        pair_ai_.push_back(att0 + i);
        pair_aj_.push_back(att0 + j);
        pair_event_.push_back(event);
        pair_norm_.push_back(pn);
      }
    }
  }
  event_entities_.push_back(n);
  event_attention_offset_.push_back(att0);
  event_code_.push_back(code_row);
  attention_rows_ += n;
  code_rows_ = std::max(code_rows_, code_row + 1);
  cache_.reset();
  return static_cast<int>(event);
}

const SceneBatch::Cache& SceneBatch::cache() const {
  if (cache_) return *cache_;
  auto c = std::make_shared<Cache>();
  const auto r = static_cast<Index>(entity_.size());
  c->positions = Tensor(r, 2);
  c->colors = Tensor(r, 3);
  c->statics = Tensor(r, kShapeCount + 1);
  for (Index i = 0; i < r; ++i) {
    const auto& e = entity_[static_cast<std::size_t>(i)];
    c->positions(i, 0) = e.pos[0];
    c->positions(i, 1) = e.pos[1];
    for (int k = 0; k < 3; ++k) c->colors(i, k) = e.color[static_cast<std::size_t>(k)];
    if (e.shape >= 0 && e.shape < kShapeCount) c->statics(i, e.shape) = 1.0;
    c->statics(i, kShapeCount) = time_[static_cast<std::size_t>(i)];
  }
  const auto f = static_cast<Index>(free_origin_.size());
  c->origin_positions = Tensor(f, 2);
  c->origin_colors = Tensor(f, 3);
  for (Index i = 0; i < f; ++i) {
    const auto& e = free_origin_[static_cast<std::size_t>(i)];
    for (int k = 0; k < 2; ++k) c->origin_positions(i, k) = e.pos[static_cast<std::size_t>(k)];
    for (int k = 0; k < 3; ++k) c->origin_colors(i, k) = e.color[static_cast<std::size_t>(k)];
  }
  c->pair_norm = Tensor::column(pair_norm_);
  c->row_norm = Tensor::column(row_norm_);
  c->free_rows = diff::make_index(free_rows_);
  c->row_attention = diff::make_index(row_attention_);
  c->row_event = diff::make_index(row_event_);
  c->event_code = diff::make_index(event_code_);
  std::vector<Index> row_code(row_event_.size());
  for (std::size_t i = 0; i < row_event_.size(); ++i)
    row_code[i] = event_code_[static_cast<std::size_t>(row_event_[i])];
  c->row_code = diff::make_index(std::move(row_code));
  c->pair_i = diff::make_index(pair_i_);
  c->pair_j = diff::make_index(pair_j_);
  c->pair_ai = diff::make_index(pair_ai_);
  c->pair_aj = diff::make_index(pair_aj_);
  c->pair_event = diff::make_index(pair_event_);
  std::vector<Index> pair_code(pair_event_.size());
  for (std::size_t i = 0; i < pair_event_.size(); ++i)
    pair_code[i] = event_code_[static_cast<std::size_t>(pair_event_[i])];
  c->pair_code = diff::make_index(std::move(pair_code));
  cache_ = c;
  return *cache_;
}

}  // namespace cem
