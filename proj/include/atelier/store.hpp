#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "atelier/control_maps.hpp"
#include "atelier/job_model.hpp"
#include "atelier/raster.hpp"

namespace atelier {

struct DepthMeta {
  double near = 0.0;
  double far = 0.0;
};

struct CaptureInfo {
  std::string id;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  bool has_depth = false;
  std::optional<DepthMeta> depth_meta;
  Timestamp created_ms = 0;
};

struct JobRecord {
  RenderJob job;
  std::int64_t revision = 0;
};

/// Plain-directory project persistence:
///
///   captures/<id>.png, <id>.depth.png, <id>.meta.json
///   jobs/<id>.json              {"v":1,"revision":N,"job":{...}}
///   results/<job>/<n>.png
///   masks/<job>.png
///   controls/<job>/<kind>.png
///   styles.json                 {"v":1,"styles":[...]}
///
/// Safe for concurrent use inside one process. Several processes sharing a
/// root are not supported.
class ProjectStore {
 public:
  /// Creates the directory skeleton. Throws IoError.
  explicit ProjectStore(std::filesystem::path root);

  const std::filesystem::path& root() const noexcept { return root_; }

  /// Stores the bytes verbatim after validating them. Throws MalformedPng,
  /// UnsupportedPng, DimensionMismatch, MissingDepthMeta, InvalidDepth.
  std::string put_capture(std::span<const std::uint8_t> color_png,
                          std::optional<std::span<const std::uint8_t>> depth_png = std::nullopt,
                          std::optional<DepthMeta> meta = std::nullopt);
  bool has_capture(const std::string& id) const;
  /// Throws NotFound.
  CaptureInfo capture_info(const std::string& id) const;
  std::vector<std::uint8_t> capture_png(const std::string& id) const;
  RasterImage load_capture(const std::string& id) const;
  /// nullopt when the capture has no depth.
  std::optional<DepthBuffer> load_capture_depth(const std::string& id) const;

  /// Compare-and-set: expected_revision 0 creates the job. Returns the new
  /// revision. Throws RevisionConflict, NotFound (unknown capture), IoError.
  std::int64_t save_job(const RenderJob& job, std::int64_t expected_revision);
  std::optional<JobRecord> find_job(const std::string& id) const;
  /// Throws NotFound.
  JobRecord load_job(const std::string& id) const;
  /// Ordered by creation time, then id.
  std::vector<JobRecord> list_jobs(std::optional<JobState> state = std::nullopt) const;

  void put_result(const std::string& job_id, std::size_t index, const RasterImage& img);
  std::vector<std::uint8_t> result_png(const std::string& job_id, std::size_t index) const;
  bool has_result(const std::string& job_id, std::size_t index) const;
  std::size_t count_results(const std::string& job_id) const;
  void delete_results(const std::string& job_id);

  void put_mask(const std::string& job_id, const GrayImage& mask);
  GrayImage load_mask(const std::string& job_id) const;

  void put_control(const std::string& job_id, ControlKind kind, const GrayImage& map);
  std::optional<GrayImage> load_control(const std::string& job_id, ControlKind kind) const;

  /// Resolves capture:, result: and mask: references to pixels (RGBA for
  /// capture/result, gray for masks). Throws NotFound.
  RasterImage load_image_ref(const std::string& ref) const;

  /// Read on every call so hand edits apply without a restart. A missing
  /// file is an empty registry. Throws MalformedRegistry, DuplicateStyle.
  StyleRegistry load_style_registry() const;
  void save_style_registry(const StyleRegistry& registry);

  /// Test hook invoked after a job's temp file is written and before it is
  /// renamed into place. Throwing from it simulates a crash at that point.
  void set_before_rename_hook(std::function<void(const std::filesystem::path&)> hook);

 private:
  std::filesystem::path capture_path(const std::string& id, const char* suffix) const;
  std::filesystem::path job_path(const std::string& id) const;
  std::filesystem::path result_path(const std::string& job_id, std::size_t index) const;
  void write_atomic(const std::filesystem::path& target, std::span<const std::uint8_t> bytes,
                    bool use_hook);
  std::optional<JobRecord> read_job_file(const std::filesystem::path& path) const;

  std::filesystem::path root_;
  mutable std::mutex jobs_mu_;
  std::function<void(const std::filesystem::path&)> before_rename_;
};

StyleRegistry style_registry_from_json(const nlohmann::json& doc);

}  // namespace atelier
