#include "ecgi/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "ecgi/errors.hpp"
#include "ecgi/rng.hpp"

namespace ecgi {

namespace {

constexpr double kPi = std::numbers::pi;

double angle_of(const Vec2& p) {
    double a = std::atan2(p.y(), p.x());
    if (a < 0.0) a += 2.0 * kPi;
    return a;
}

} // namespace

double SurfaceMesh1D::totalLength() const {
    double s = 0.0;
    for (double l : segmentLengths) s += l;
    return s;
}

double triangle_signed_area(const Vec2& a, const Vec2& b, const Vec2& c) {
    return 0.5 * ((b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x()));
}

double min_triangle_angle_deg(const Mesh2D& mesh) {
    double minAngle = 180.0;
    for (const auto& t : mesh.triangles) {
        for (int k = 0; k < 3; ++k) {
            const Vec2& p = mesh.vertices[t.v[k]];
            const Vec2& q = mesh.vertices[t.v[(k + 1) % 3]];
            const Vec2& r = mesh.vertices[t.v[(k + 2) % 3]];
            const Vec2 u = q - p, w = r - p;
            const double cosA = u.dot(w) / (u.norm() * w.norm());
            const double ang = std::acos(std::clamp(cosA, -1.0, 1.0)) * 180.0 / kPi;
            minAngle = std::min(minAngle, ang);
        }
    }
    return minAngle;
}

double max_element_diameter(const Mesh2D& mesh) {
    double d = 0.0;
    for (const auto& t : mesh.triangles) {
        for (int k = 0; k < 3; ++k) {
            const Vec2& p = mesh.vertices[t.v[k]];
            const Vec2& q = mesh.vertices[t.v[(k + 1) % 3]];
            d = std::max(d, (q - p).norm());
        }
    }
    return d;
}

void validate_mesh(const Mesh2D& mesh) {
    // positive orientation
    for (const auto& t : mesh.triangles) {
        if (triangle_signed_area(mesh.vertices[t.v[0]], mesh.vertices[t.v[1]],
                                 mesh.vertices[t.v[2]]) <= 0.0)
            throw MeshQuality("triangle with non-positive signed area");
    }

    // conformity: every edge in exactly 2 triangles, or 1 if it is a boundary edge
    std::map<std::pair<int, int>, int> edgeUse;
    auto key = [](int a, int b) { return std::make_pair(std::min(a, b), std::max(a, b)); };
    for (const auto& t : mesh.triangles) {
        for (int k = 0; k < 3; ++k)
            edgeUse[key(t.v[k], t.v[(k + 1) % 3])]++;
    }
    std::set<std::pair<int, int>> boundary;
    for (const auto& e : mesh.boundaryEdges) boundary.insert(key(e.a, e.b));
    for (const auto& [e, n] : edgeUse) {
        const bool isBoundary = boundary.count(e) > 0;
        if (isBoundary && n != 1)
            throw TopologyError("boundary edge shared by more than one triangle");
        if (!isBoundary && n != 2)
            throw TopologyError("interior edge not shared by exactly two triangles");
    }
    for (const auto& e : boundary) {
        if (!edgeUse.count(e)) throw TopologyError("boundary edge not present in any triangle");
    }

    // boundary vertices on their circles
    for (const auto& e : mesh.boundaryEdges) {
        for (int vid : {e.a, e.b}) {
            const Vec2& p = mesh.vertices[vid];
            if (e.marker == BoundaryMarker::Heart) {
                const double dr = std::abs((p - mesh.heartCenter).norm() - mesh.heartRadius);
                if (dr > 1e-12 * mesh.heartRadius)
                    throw MeshQuality("HEART vertex off the heart circle");
            } else {
                const double dr = std::abs(p.norm() - mesh.outerRadius);
                if (dr > 1e-12 * mesh.outerRadius)
                    throw MeshQuality("OUTER vertex off the torso circle");
            }
        }
    }

    if (min_triangle_angle_deg(mesh) < 20.0)
        throw MeshQuality("minimum triangle angle below 20 degrees");
}

Mesh2D build_torso_mesh(const MeshConfig& config) {
    const double R = config.outerRadius;
    const double rH = config.heartRadius;
    const Vec2 cH = config.heartCenter;

    if (config.targetH <= 0.0) throw ParameterOutOfRange("targetH must be positive");
    if (rH <= 0.0 || R <= 0.0) throw ParameterOutOfRange("radii must be positive");
    if (cH.norm() + rH >= R)
        throw GeometryOverlap("heart disk not strictly inside torso disk");
    for (const auto& lung : config.lungDisks) {
        if (lung.radius <= 0.0) throw ParameterOutOfRange("lung radius must be positive");
        if (lung.center.norm() + lung.radius >= R)
            throw GeometryOverlap("lung disk not inside torso disk");
        if ((lung.center - cH).norm() <= lung.radius + rH)
            throw GeometryOverlap("lung disk overlaps heart disk");
    }

    // Structured transfinite grid between the heart circle and the torso circle:
    // uniform angular sampling, geometric radial grading so local cells stay
    // close to square, followed by seeded jitter and Laplacian relaxation.
    const int nTheta = std::max(16, static_cast<int>(std::ceil(2.0 * kPi * R / config.targetH)));
    const double dTheta = 2.0 * kPi / nTheta;
    const int nRings = std::max(2, static_cast<int>(std::llround(std::log(R / rH) / std::log1p(dTheta))));

    Mesh2D mesh;
    mesh.outerRadius = R;
    mesh.heartRadius = rH;
    mesh.heartCenter = cH;

    const int nV = (nRings + 1) * nTheta;
    mesh.vertices.resize(nV);
    auto vid = [&](int ring, int j) { return ring * nTheta + ((j % nTheta + nTheta) % nTheta); };

    for (int k = 0; k <= nRings; ++k) {
        const double rk = rH * std::pow(R / rH, static_cast<double>(k) / nRings);
        const double rho = (rk - rH) / (R - rH);
        for (int j = 0; j < nTheta; ++j) {
            const double th = j * dTheta;
            const Vec2 e(std::cos(th), std::sin(th));
            mesh.vertices[vid(k, j)] = (1.0 - rho) * (cH + rH * e) + rho * (R * e);
        }
    }

    // jitter interior rings, then smooth
    if (config.jitter > 0.0) {
        Rng rng(config.seed);
        for (int k = 1; k < nRings; ++k) {
            const double rk = rH * std::pow(R / rH, static_cast<double>(k) / nRings);
            const double localH = rk * dTheta;
            for (int j = 0; j < nTheta; ++j) {
                const double dx = rng.uniform(-1.0, 1.0), dy = rng.uniform(-1.0, 1.0);
                mesh.vertices[vid(k, j)] += config.jitter * localH * Vec2(dx, dy);
            }
        }
    }

    mesh.triangles.reserve(2 * nRings * nTheta);
    for (int k = 0; k < nRings; ++k) {
        for (int j = 0; j < nTheta; ++j) {
            const int a = vid(k, j), b = vid(k, j + 1), c = vid(k + 1, j + 1), d = vid(k + 1, j);
            // alternate the quad diagonal for symmetry
            if ((k + j) % 2 == 0) {
                mesh.triangles.push_back({{a, b, c}, Region::Torso});
                mesh.triangles.push_back({{a, c, d}, Region::Torso});
            } else {
                mesh.triangles.push_back({{a, b, d}, Region::Torso});
                mesh.triangles.push_back({{b, c, d}, Region::Torso});
            }
        }
    }

    if (config.smoothingSweeps > 0) {
        std::vector<std::set<int>> nbr(nV);
        for (const auto& t : mesh.triangles) {
            for (int e = 0; e < 3; ++e) {
                nbr[t.v[e]].insert(t.v[(e + 1) % 3]);
                nbr[t.v[e]].insert(t.v[(e + 2) % 3]);
            }
        }
        for (int sweep = 0; sweep < config.smoothingSweeps; ++sweep) {
            std::vector<Vec2> next = mesh.vertices;
            for (int k = 1; k < nRings; ++k) {
                for (int j = 0; j < nTheta; ++j) {
                    const int i = vid(k, j);
                    Vec2 acc(0.0, 0.0);
                    for (int m : nbr[i]) acc += mesh.vertices[m];
                    next[i] = acc / static_cast<double>(nbr[i].size());
                }
            }
            mesh.vertices.swap(next);
        }
    }

    for (auto& t : mesh.triangles) {
        if (triangle_signed_area(mesh.vertices[t.v[0]], mesh.vertices[t.v[1]],
                                 mesh.vertices[t.v[2]]) < 0.0)
            std::swap(t.v[1], t.v[2]);
        Vec2 centroid = (mesh.vertices[t.v[0]] + mesh.vertices[t.v[1]] + mesh.vertices[t.v[2]]) / 3.0;
        for (const auto& lung : config.lungDisks) {
            if ((centroid - lung.center).norm() < lung.radius) {
                t.tag = Region::Lung;
                break;
            }
        }
    }

    mesh.boundaryEdges.reserve(2 * nTheta);
    for (int j = 0; j < nTheta; ++j)
        mesh.boundaryEdges.push_back({vid(0, j), vid(0, j + 1), BoundaryMarker::Heart});
    for (int j = 0; j < nTheta; ++j)
        mesh.boundaryEdges.push_back({vid(nRings, j), vid(nRings, j + 1), BoundaryMarker::Outer});

    validate_mesh(mesh);
    if (max_element_diameter(mesh) > 1.5 * config.targetH)
        throw MeshQuality("element diameter exceeds 1.5 * targetH");
    return mesh;
}

SurfaceMesh1D extract_epicardial_curve(const Mesh2D& mesh) {
    std::vector<int> heartEdges;
    for (int i = 0; i < static_cast<int>(mesh.boundaryEdges.size()); ++i)
        if (mesh.boundaryEdges[i].marker == BoundaryMarker::Heart) heartEdges.push_back(i);
    if (heartEdges.size() < 3) throw TopologyError("need at least 3 HEART boundary edges");

    std::map<int, std::vector<int>> incid;  // vertex -> heart edge ids
    for (int e : heartEdges) {
        incid[mesh.boundaryEdges[e].a].push_back(e);
        incid[mesh.boundaryEdges[e].b].push_back(e);
    }
    for (const auto& [v, es] : incid)
        if (es.size() != 2) throw TopologyError("HEART edges do not form a closed loop");

    // walk the loop
    std::vector<int> loop;
    std::set<int> used;
    int curEdge = heartEdges[0];
    int curVert = mesh.boundaryEdges[curEdge].a;
    loop.push_back(curVert);
    used.insert(curEdge);
    int nextVert = mesh.boundaryEdges[curEdge].b;
    while (nextVert != loop.front()) {
        loop.push_back(nextVert);
        const auto& es = incid[nextVert];
        const int e = (used.count(es[0]) == 0) ? es[0] : es[1];
        if (used.count(e)) throw TopologyError("HEART edges do not form a closed loop");
        used.insert(e);
        const auto& be = mesh.boundaryEdges[e];
        nextVert = (be.a == nextVert) ? be.b : be.a;
    }
    if (used.size() != heartEdges.size())
        throw TopologyError("HEART edges form more than one loop");

    // counterclockwise around the heart center
    double area2 = 0.0;
    const int n = static_cast<int>(loop.size());
    for (int k = 0; k < n; ++k) {
        const Vec2 p = mesh.vertices[loop[k]] - mesh.heartCenter;
        const Vec2 q = mesh.vertices[loop[(k + 1) % n]] - mesh.heartCenter;
        area2 += p.x() * q.y() - p.y() * q.x();
    }
    if (area2 < 0.0) std::reverse(loop.begin(), loop.end());

    SurfaceMesh1D surf;
    surf.vertexIds = loop;
    surf.points.resize(n);
    for (int k = 0; k < n; ++k) surf.points[k] = mesh.vertices[loop[k]];
    surf.segmentLengths.resize(n);
    surf.tangents.resize(n);
    surf.normals.resize(n);
    for (int k = 0; k < n; ++k) {
        const Vec2 d = surf.points[(k + 1) % n] - surf.points[k];
        const double len = d.norm();
        if (len <= 0.0) throw TopologyError("zero-length epicardial segment");
        surf.segmentLengths[k] = len;
        surf.tangents[k] = d / len;
        surf.normals[k] = Vec2(surf.tangents[k].y(), -surf.tangents[k].x());
    }
    return surf;
}

ElectrodeSet define_electrodes(const Mesh2D& mesh, int nElectrodes, double coverageFraction) {
    if (nElectrodes < 1) throw ParameterOutOfRange("nElectrodes must be >= 1");
    if (coverageFraction <= 0.0 || coverageFraction > 1.0)
        throw ParameterOutOfRange("coverageFraction must lie in (0, 1]");

    struct OuterEdge {
        int id;
        double angle;
        double length;
    };
    std::vector<OuterEdge> outer;
    for (int i = 0; i < static_cast<int>(mesh.boundaryEdges.size()); ++i) {
        const auto& e = mesh.boundaryEdges[i];
        if (e.marker != BoundaryMarker::Outer) continue;
        const Vec2 mid = 0.5 * (mesh.vertices[e.a] + mesh.vertices[e.b]);
        outer.push_back({i, angle_of(mid), (mesh.vertices[e.b] - mesh.vertices[e.a]).norm()});
    }
    if (static_cast<int>(outer.size()) < 2 * nElectrodes)
        throw InsufficientResolution("OUTER boundary has fewer than 2*nElectrodes edges");
    std::sort(outer.begin(), outer.end(),
              [](const OuterEdge& x, const OuterEdge& y) { return x.angle < y.angle; });

    const double halfWidth = coverageFraction * kPi / nElectrodes;  // patch angular half width
    const double spacing = 2.0 * kPi / nElectrodes;
    ElectrodeSet set;
    set.patches.resize(nElectrodes);
    set.patchLengths.assign(nElectrodes, 0.0);
    for (const auto& e : outer) {
        // nearest patch center; the patch widths never overlap for f <= 1
        const int c = static_cast<int>(std::llround(e.angle / spacing)) % nElectrodes;
        const double center = spacing * c;
        const double d = std::fmod(e.angle - center + 3.0 * kPi, 2.0 * kPi) - kPi;
        if (std::abs(d) <= halfWidth + 1e-12) {
            set.patches[c].push_back(e.id);
            set.patchLengths[c] += e.length;
        }
    }
    for (int c = 0; c < nElectrodes; ++c)
        if (set.patches[c].empty())
            throw InsufficientResolution("electrode patch contains no edges");
    return set;
}

Mesh2D refine_uniform(const Mesh2D& mesh) {
    validate_mesh(mesh);

    Mesh2D out;
    out.outerRadius = mesh.outerRadius;
    out.heartRadius = mesh.heartRadius;
    out.heartCenter = mesh.heartCenter;
    out.vertices = mesh.vertices;

    std::map<std::pair<int, int>, int> midpointOf;
    auto key = [](int a, int b) { return std::make_pair(std::min(a, b), std::max(a, b)); };

    std::set<std::pair<int, int>> heartEdges, outerEdges;
    for (const auto& e : mesh.boundaryEdges) {
        if (e.marker == BoundaryMarker::Heart)
            heartEdges.insert(key(e.a, e.b));
        else
            outerEdges.insert(key(e.a, e.b));
    }

    auto midpoint = [&](int a, int b) {
        const auto k = key(a, b);
        auto it = midpointOf.find(k);
        if (it != midpointOf.end()) return it->second;
        Vec2 p = 0.5 * (mesh.vertices[a] + mesh.vertices[b]);
        // snap new boundary vertices to the exact circles
        if (heartEdges.count(k)) {
            Vec2 d = p - mesh.heartCenter;
            p = mesh.heartCenter + mesh.heartRadius * d / d.norm();
        } else if (outerEdges.count(k)) {
            p = mesh.outerRadius * p / p.norm();
        }
        const int id = static_cast<int>(out.vertices.size());
        out.vertices.push_back(p);
        midpointOf.emplace(k, id);
        return id;
    };

    out.triangles.reserve(4 * mesh.triangles.size());
    for (const auto& t : mesh.triangles) {
        const int a = t.v[0], b = t.v[1], c = t.v[2];
        const int ab = midpoint(a, b), bc = midpoint(b, c), ca = midpoint(c, a);
        out.triangles.push_back({{a, ab, ca}, t.tag});
        out.triangles.push_back({{ab, b, bc}, t.tag});
        out.triangles.push_back({{ca, bc, c}, t.tag});
        out.triangles.push_back({{ab, bc, ca}, t.tag});
    }

    out.boundaryEdges.reserve(2 * mesh.boundaryEdges.size());
    for (const auto& e : mesh.boundaryEdges) {
        const int m = midpointOf.at(key(e.a, e.b));
        out.boundaryEdges.push_back({e.a, m, e.marker});
        out.boundaryEdges.push_back({m, e.b, e.marker});
    }

    for (auto& t : out.triangles) {
        if (triangle_signed_area(out.vertices[t.v[0]], out.vertices[t.v[1]],
                                 out.vertices[t.v[2]]) < 0.0)
            std::swap(t.v[1], t.v[2]);
    }

    validate_mesh(out);
    return out;
}

void save_mesh(const Mesh2D& mesh, const ElectrodeSet* electrodes, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open mesh file for writing: " + path);
    f.precision(17);
    f << "mesh2d v1\n";
    f << "radii " << mesh.heartRadius << " " << mesh.outerRadius << " "
      << mesh.heartCenter.x() << " " << mesh.heartCenter.y() << "\n";
    f << "vertices " << mesh.vertices.size() << "\n";
    for (const auto& v : mesh.vertices) f << v.x() << " " << v.y() << "\n";
    f << "triangles " << mesh.triangles.size() << "\n";
    for (const auto& t : mesh.triangles)
        f << t.v[0] << " " << t.v[1] << " " << t.v[2] << " "
          << (t.tag == Region::Lung ? "LUNG" : "TORSO") << "\n";
    f << "boundary " << mesh.boundaryEdges.size() << "\n";
    for (const auto& e : mesh.boundaryEdges)
        f << e.a << " " << e.b << " "
          << (e.marker == BoundaryMarker::Heart ? "HEART" : "OUTER") << "\n";
    const int nPatch = electrodes ? electrodes->patchCount() : 0;
    f << "electrodes " << nPatch << "\n";
    for (int c = 0; c < nPatch; ++c) {
        const auto& run = electrodes->patches[c];
        f << run.size();
        for (int e : run) f << " " << e;
        f << "\n";
    }
    if (!f) throw IoError("failed writing mesh file: " + path);
}

LoadedMesh load_mesh(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open mesh file: " + path);
    std::string header;
    std::getline(f, header);
    if (header != "mesh2d v1") throw IoError("bad mesh header in " + path);

    LoadedMesh out;
    Mesh2D& mesh = out.mesh;
    std::string word;
    f >> word;
    if (word != "radii") throw IoError("expected radii block");
    f >> mesh.heartRadius >> mesh.outerRadius >> mesh.heartCenter.x() >> mesh.heartCenter.y();

    size_t n = 0;
    f >> word >> n;
    if (word != "vertices") throw IoError("expected vertices block");
    mesh.vertices.resize(n);
    for (auto& v : mesh.vertices) f >> v.x() >> v.y();

    f >> word >> n;
    if (word != "triangles") throw IoError("expected triangles block");
    mesh.triangles.resize(n);
    for (auto& t : mesh.triangles) {
        std::string tag;
        f >> t.v[0] >> t.v[1] >> t.v[2] >> tag;
        t.tag = (tag == "LUNG") ? Region::Lung : Region::Torso;
    }

    f >> word >> n;
    if (word != "boundary") throw IoError("expected boundary block");
    mesh.boundaryEdges.resize(n);
    for (auto& e : mesh.boundaryEdges) {
        std::string marker;
        f >> e.a >> e.b >> marker;
        e.marker = (marker == "HEART") ? BoundaryMarker::Heart : BoundaryMarker::Outer;
    }

    f >> word >> n;
    if (word != "electrodes") throw IoError("expected electrodes block");
    out.electrodes.patches.resize(n);
    out.electrodes.patchLengths.assign(n, 0.0);
    for (size_t c = 0; c < n; ++c) {
        size_t runLen = 0;
        f >> runLen;
        out.electrodes.patches[c].resize(runLen);
        for (auto& e : out.electrodes.patches[c]) f >> e;
        for (int e : out.electrodes.patches[c])
            out.electrodes.patchLengths[c] +=
                (mesh.vertices[mesh.boundaryEdges[e].b] - mesh.vertices[mesh.boundaryEdges[e].a]).norm();
    }
    if (!f) throw IoError("truncated mesh file: " + path);
    return out;
}

} // namespace ecgi
