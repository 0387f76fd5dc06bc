#include "voldet/io.hpp"

#include "voldet/errors.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace voldet {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> fields;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            fields.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    fields.push_back(cur);
    return fields;
}

double parse_number(const std::string& s, const std::string& path, std::size_t line_no) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": non-numeric field '" + s + "'");
    }
}

} // namespace

std::string fmt6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

std::uint64_t fnv1a64(const std::string& text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

AnnotationMap parse_annotations(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ParseError("parse_annotations: cannot open " + path);
    std::string line;
    if (!std::getline(is, line)) throw ParseError(path + ":1: missing header");
    if (split_csv(line) != std::vector<std::string>{"scan_id", "z", "y", "x", "d"})
        throw ParseError(path + ":1: expected header scan_id,z,y,x,d");

    AnnotationMap out;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_csv(line);
        if (fields.size() != 5)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected 5 fields, got " +
                             std::to_string(fields.size()));
        if (fields[0].empty())
            throw ParseError(path + ":" + std::to_string(line_no) + ": empty scan_id");
        Box3D box;
        box.z = parse_number(fields[1], path, line_no);
        box.y = parse_number(fields[2], path, line_no);
        box.x = parse_number(fields[3], path, line_no);
        box.d = parse_number(fields[4], path, line_no);
        if (!(box.d > 0.0))
            throw ParseError(path + ":" + std::to_string(line_no) + ": diameter must be > 0");
        out[fields[0]].push_back(box);
    }
    return out;
}

void write_annotations_csv(const std::string& path, const std::vector<Annotation>& annotations) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_annotations_csv: cannot open " + path);
    os << "scan_id,z,y,x,d\n";
    for (const Annotation& a : annotations)
        os << a.scan_id << ',' << fmt6(a.box.z) << ',' << fmt6(a.box.y) << ',' << fmt6(a.box.x)
           << ',' << fmt6(a.box.d) << '\n';
    if (!os) throw std::runtime_error("write_annotations_csv: write failed for " + path);
}

void write_predictions_csv(const std::string& path, const std::vector<PredictionRow>& rows) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_predictions_csv: cannot open " + path);
    os << "scan_id,z,y,x,d,rpn_score,fpr_score,fused_score\n";
    for (const PredictionRow& r : rows) {
        os << r.scan_id << ',' << fmt6(r.box.z) << ',' << fmt6(r.box.y) << ',' << fmt6(r.box.x)
           << ',' << fmt6(r.box.d) << ',' << fmt6(r.rpn_score) << ',';
        if (r.fpr_score >= 0.0) os << fmt6(r.fpr_score);
        os << ',' << fmt6(r.fused_score) << '\n';
    }
    if (!os) throw std::runtime_error("write_predictions_csv: write failed for " + path);
}

std::vector<PredictionRow> parse_predictions(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ParseError("parse_predictions: cannot open " + path);
    std::string line;
    if (!std::getline(is, line)) throw ParseError(path + ":1: missing header");
    if (split_csv(line) != std::vector<std::string>{"scan_id", "z", "y", "x", "d", "rpn_score",
                                                    "fpr_score", "fused_score"})
        throw ParseError(path + ":1: expected predictions header");
    std::vector<PredictionRow> rows;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_csv(line);
        if (fields.size() != 8)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected 8 fields");
        PredictionRow r;
        r.scan_id = fields[0];
        r.box.z = parse_number(fields[1], path, line_no);
        r.box.y = parse_number(fields[2], path, line_no);
        r.box.x = parse_number(fields[3], path, line_no);
        r.box.d = parse_number(fields[4], path, line_no);
        r.rpn_score = parse_number(fields[5], path, line_no);
        r.fpr_score = fields[6].empty() ? -1.0 : parse_number(fields[6], path, line_no);
        r.fused_score = parse_number(fields[7], path, line_no);
        rows.push_back(r);
    }
    return rows;
}

void write_manifest(const std::string& path, const DatasetManifest& manifest) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("write_manifest: cannot open " + path);
    os << "annotations = " << manifest.annotations_path << '\n';
    for (const DatasetEntry& e : manifest.entries)
        os << "scan = " << e.scan_id << ',' << e.volume_path << ',' << e.split << '\n';
    if (!os) throw std::runtime_error("write_manifest: write failed for " + path);
}

DatasetManifest read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ParseError("read_manifest: cannot open " + path);
    const std::filesystem::path base = std::filesystem::path(path).parent_path();
    auto resolve = [&base](const std::string& p) {
        std::filesystem::path fp(p);
        return fp.is_absolute() ? fp.string() : (base / fp).string();
    };

    DatasetManifest out;
    std::string line;
    std::size_t line_no = 0;
    std::map<std::string, int> seen_ids;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected key = value");
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key == "annotations") {
            out.annotations_path = resolve(value);
        } else if (key == "scan") {
            const auto fields = split_csv(value);
            if (fields.size() != 3)
                throw ParseError(path + ":" + std::to_string(line_no) + ": scan needs id,path,split");
            if (fields[2] != "train" && fields[2] != "test")
                throw ParseError(path + ":" + std::to_string(line_no) + ": split must be train|test");
            if (++seen_ids[fields[0]] > 1)
                throw ParseError(path + ":" + std::to_string(line_no) + ": duplicate scan_id " + fields[0]);
            out.entries.push_back({fields[0], resolve(fields[1]), fields[2]});
        } else {
            throw ParseError(path + ":" + std::to_string(line_no) + ": unknown key '" + key + "'");
        }
    }
    return out;
}

} // namespace voldet
