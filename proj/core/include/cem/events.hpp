#pragma once

// Procedural concept episodes: each episode holds demonstration and training events of
// one concept together with ground-truth attention masks, plus a JSONL dataset format.

#include "cem/scene.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cem {

enum class Family { Color, Region, Placement, Shape, Proximity, Quantity, Temporal };
inline constexpr int kFamilyCount = 7;
enum class Context { Generation, Identification };

const char* family_name(Family f);
std::optional<Family> parse_family(const std::string& s);
const char* context_name(Context c);
std::optional<Context> parse_context(const std::string& s);

// Named palette used for argument and target colors.
inline constexpr int kPaletteSize = 6;
const char* palette_name(int i);
std::array<double, 3> palette_color(int i);
std::optional<int> parse_palette(const std::string& s);

// A concept instance. `variant` selects the family member:
//   color     target color name           region     point | line | circle | square
//   placement north | south | east | west | between
//   shape     join | line | triangle | square
//   proximity closest | farthest          quantity   1 | 2 | 3 | many
//   temporal  after
// `values` carries the episode-wide geometry (anchor point, line offset, circle centre...).
// `argument` is the palette color (shape tag for the color family) that selects the
// attended entities in generation context.
struct ConceptSpec {
  Family family = Family::Region;
  std::string variant = "point";
  Context context = Context::Generation;
  int argument = 0;
  std::vector<double> values;

  std::string name() const;  // "family/variant"
  void validate() const;
  bool operator==(const ConceptSpec&) const = default;
};

inline constexpr int kDemoEvents = 5;
inline constexpr int kTrainEvents = 5;
inline constexpr int kMinEntities = 3;
inline constexpr int kMaxEntities = 8;

struct Episode {
  ConceptSpec spec;
  std::vector<Event> events;  // kDemoEvents demonstrations followed by kTrainEvents

  std::span<const Event> demos() const { return {events.data(), kDemoEvents}; }
  std::span<const Event> train() const { return {events.data() + kDemoEvents, kTrainEvents}; }
  bool operator==(const Episode&) const = default;
};

class GeneratorError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Random concept of `family`; `variant` (empty = random) pins the family member and
// `context` (empty = random) the context.
ConceptSpec sample_concept(Family family, std::uint64_t seed, const std::string& variant = "",
                           std::optional<Context> context = std::nullopt);

// Ten events of `spec`. Throws GeneratorError after 1000 consecutive rejections.
Episode generate_episode(const ConceptSpec& spec, std::uint64_t seed);

// Whether `event` with `mask` instantiates `spec` within the family tolerances.
bool verify_event(const ConceptSpec& spec, const Event& event, std::span<const int> mask);

// Which entity channel generation changes for this concept.
bool changes_color(const ConceptSpec& spec);

// Selection of concepts for dataset generation: a family optionally pinned to a variant.
struct ConceptFilter {
  Family family;
  std::string variant;  // empty = any
};
// Parses "all", "color", "region:point", "absolute_position" (= region:point), comma lists.
std::vector<ConceptFilter> parse_concepts(const std::string& list);

// `count` episodes cycling through `filters`; episode i is seeded from (seed, i).
std::vector<Episode> generate_dataset(std::span<const ConceptFilter> filters, int count,
                                      std::uint64_t seed,
                                      std::optional<Context> context = std::nullopt);

class DatasetError : public std::runtime_error {
 public:
  DatasetError(const std::string& what, std::size_t line, const std::string& field)
      : std::runtime_error(what), line_(line), field_(field) {}
  std::size_t line() const { return line_; }  // 1-based record index, 0 for file-level errors
  const std::string& field() const { return field_; }

 private:
  std::size_t line_;
  std::string field_;
};

// Floats are written with 9 significant digits; generated values are pre-quantized to
// that precision so a round trip is value-exact.
std::string episode_to_json(const Episode& e);
Episode episode_from_json(const std::string& line, std::size_t line_number = 0);
void save_dataset(const std::filesystem::path& path, std::span<const Episode> episodes);
std::vector<Episode> load_dataset(const std::filesystem::path& path);

// Rounds to 9 significant digits.
double quantize(double v);

}  // namespace cem
