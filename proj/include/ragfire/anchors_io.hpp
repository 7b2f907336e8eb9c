#pragma once

#include <iosfwd>

#include "ragfire/detection.hpp"

namespace ragfire {

// Versioned binary anchor file (magic "RFAZ"): header with client, layer set,
// anchor counts, width, seed, pooling and backend fingerprint, followed by
// the query then document anchor vectors as row-major 64-bit floats (one row
// per layer in layer_set order, anchor-major), followed by the source-text
// table in the same anchor order.
void save_anchors(const AnchorSet& anchors, std::ostream& out);
void save_anchors_file(const AnchorSet& anchors, const std::string& path);
AnchorSet load_anchors(std::istream& in);
AnchorSet load_anchors_file(const std::string& path);

}  // namespace ragfire
