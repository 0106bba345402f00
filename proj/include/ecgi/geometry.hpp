#ifndef ECGI_GEOMETRY_HPP
#define ECGI_GEOMETRY_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace ecgi {

using Vec2 = Eigen::Vector2d;

enum class Region : uint8_t { Torso = 0, Lung = 1 };
enum class BoundaryMarker : uint8_t { Heart = 0, Outer = 1 };

struct Triangle {
    int v[3];
    Region tag = Region::Torso;
};

struct BoundaryEdge {
    int a = -1, b = -1;
    BoundaryMarker marker = BoundaryMarker::Outer;
};

struct Disk {
    Vec2 center{0.0, 0.0};
    double radius = 0.0;
};

// Conforming triangulation of the torso-minus-heart annulus. Vertices on the
// heart/torso circles carry the corresponding boundary marker; triangles are
// positively oriented.
struct Mesh2D {
    std::vector<Vec2> vertices;
    std::vector<Triangle> triangles;
    std::vector<BoundaryEdge> boundaryEdges;
    double outerRadius = 0.0;
    double heartRadius = 0.0;
    Vec2 heartCenter{0.0, 0.0};

    int vertexCount() const { return static_cast<int>(vertices.size()); }
    int triangleCount() const { return static_cast<int>(triangles.size()); }
};

struct MeshConfig {
    double outerRadius = 3.0;
    double heartRadius = 1.0;
    Vec2 heartCenter{0.0, 0.0};
    std::vector<Disk> lungDisks;
    double targetH = 0.3;
    uint64_t seed = 0;
    double jitter = 0.15;    // interior jitter amplitude, fraction of local spacing
    int smoothingSweeps = 25;
};

// Closed epicardial boundary polyline, oriented counterclockwise around the
// heart center. Segment k connects node k to node (k+1) mod n.
struct SurfaceMesh1D {
    std::vector<int> vertexIds;           // indices into the owning Mesh2D
    std::vector<Vec2> points;             // node coordinates (own copy)
    std::vector<double> segmentLengths;
    std::vector<Vec2> tangents;           // unit, along the loop direction
    std::vector<Vec2> normals;            // unit, pointing away from the heart center

    int nodeCount() const { return static_cast<int>(points.size()); }
    int segmentCount() const { return static_cast<int>(segmentLengths.size()); }
    double totalLength() const;
};

// Electrode patches: disjoint contiguous runs of OUTER boundary edges.
struct ElectrodeSet {
    std::vector<std::vector<int>> patches;  // indices into Mesh2D::boundaryEdges
    std::vector<double> patchLengths;

    int patchCount() const { return static_cast<int>(patches.size()); }
};

Mesh2D build_torso_mesh(const MeshConfig& config);
SurfaceMesh1D extract_epicardial_curve(const Mesh2D& mesh);
ElectrodeSet define_electrodes(const Mesh2D& mesh, int nElectrodes, double coverageFraction);
Mesh2D refine_uniform(const Mesh2D& mesh);

// Throws MeshQuality / TopologyError when a Mesh2D invariant is violated.
void validate_mesh(const Mesh2D& mesh);

double min_triangle_angle_deg(const Mesh2D& mesh);
double max_element_diameter(const Mesh2D& mesh);
double triangle_signed_area(const Vec2& a, const Vec2& b, const Vec2& c);

void save_mesh(const Mesh2D& mesh, const ElectrodeSet* electrodes, const std::string& path);
struct LoadedMesh {
    Mesh2D mesh;
    ElectrodeSet electrodes;
};
LoadedMesh load_mesh(const std::string& path);

} // namespace ecgi

#endif
