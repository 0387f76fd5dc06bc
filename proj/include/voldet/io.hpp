#pragma once

#include "voldet/phantom.hpp"
#include "voldet/volume.hpp"

#include <map>
#include <string>
#include <vector>

namespace voldet {

/// Ground-truth boxes per scan, keyed by scan id (ordered map so iteration
/// order is deterministic).
using AnnotationMap = std::map<std::string, std::vector<Box3D>>;

/// Parses a `scan_id,z,y,x,d` CSV. Malformed rows raise ParseError naming the
/// line number.
AnnotationMap parse_annotations(const std::string& path);

/// Writes annotations with 6-decimal fixed formatting, rows in the given
/// order.
void write_annotations_csv(const std::string& path,
                           const std::vector<Annotation>& annotations);

/// One detection row of a predictions CSV.
struct PredictionRow {
    std::string scan_id;
    Box3D box;
    double rpn_score = 0.0;
    double fpr_score = -1.0; // < 0 encodes "absent" (written as an empty field)
    double fused_score = 0.0;
};

/// Header `scan_id,z,y,x,d,rpn_score,fpr_score,fused_score`; rows must
/// already be sorted by fused score descending.
void write_predictions_csv(const std::string& path, const std::vector<PredictionRow>& rows);
std::vector<PredictionRow> parse_predictions(const std::string& path);

// Dataset manifest: `annotations = <path>` plus one `scan = id,path,split`
// line per scan. Relative paths resolve against the manifest's directory.
void write_manifest(const std::string& path, const DatasetManifest& manifest);
DatasetManifest read_manifest(const std::string& path);

/// FNV-1a 64-bit hash, used to fingerprint configs in run manifests.
std::uint64_t fnv1a64(const std::string& text);

/// Formats a double with 6 fixed decimals (the CSV number format).
std::string fmt6(double v);

} // namespace voldet
