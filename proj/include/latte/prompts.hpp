#pragma once

#include <string>
#include <string_view>

#include "latte/errors.hpp"

namespace latte {

enum class CaptionKind { kClass, kImage, kGroup };

inline std::string_view to_string(CaptionKind k) {
  switch (k) {
    case CaptionKind::kClass: return "class";
    case CaptionKind::kImage: return "image";
    case CaptionKind::kGroup: return "group";
  }
  return "?";
}

inline CaptionKind caption_kind_from_string(std::string_view s) {
  if (s == "class") return CaptionKind::kClass;
  if (s == "image") return CaptionKind::kImage;
  if (s == "group") return CaptionKind::kGroup;
  throw ConfigError("unknown caption kind '" + std::string(s) + "'");
}

// The three prompt strings are verbatim templates; substitution is the only
// transformation applied (no article agreement, no casing changes).

inline std::string render_class_text(std::string_view class_name) {
  if (class_name.empty()) throw ConfigError("class name must be non-empty");
  return "a photo of a " + std::string(class_name) + ".";
}

inline std::string render_image_prompt(std::string_view domain) {
  if (domain.empty()) throw ConfigError("domain must be non-empty");
  return "Describe the " + std::string(domain) +
         " in the photo concisely, using less than 20 words.";
}

inline std::string render_group_prompt(std::string_view domain) {
  if (domain.empty()) throw ConfigError("domain must be non-empty");
  return "Describe the common visual attributes of the " + std::string(domain) +
         " in all the photos concisely, in fewer than 20 words.";
}

}  // namespace latte
