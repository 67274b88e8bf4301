/// @file omega_recon.hpp
/// @brief Reconstruction of the traffic-attribute field from cells and driver profiles.
#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "hetflow/edie_grid.hpp"
#include "hetflow/microsim.hpp"

namespace hetflow {

struct DriverProfile {
  std::string vehicle_id;
  VehicleClass class_label = VehicleClass::Unknown;
  OvmParams ovm;          // ovm.v_free is the calibrated free-flow speed
  double omega_l = 0.0;   // stochasticity attribute
  double length = kDefaultVehicleLength;

  bool operator==(const DriverProfile&) const = default;
};

using ProfileMap = std::map<std::string, DriverProfile>;

/// id,class,tau,beta,v_free,time_gap,min_gap,length,omega_l
std::string profiles_csv(const ProfileMap& profiles);
ProfileMap read_profiles_csv(const std::string& text);

enum class OmegaProvenance { AbundantFormula, FdQuotient, NnMapping };
std::string to_string(OmegaProvenance p);

enum class MissingProfilePolicy {
  Mask,          // cells with an unprofiled member are masked and reported
  ClassAverage,  // unprofiled members borrow their class's mean profile
  Throw,         // MissingProfile
};

inline constexpr std::uint8_t kFlagClamped = 1;
inline constexpr std::uint8_t kFlagMissingProfile = 2;

struct OmegaField {
  GridSpec grid;
  std::size_t nt = 0, nx = 0;
  std::vector<double> omega;        // row-major like CellField
  std::vector<std::uint8_t> mask;   // 1 where omega is defined
  std::vector<std::uint8_t> flags;  // kFlag* bits
  OmegaProvenance provenance = OmegaProvenance::AbundantFormula;
  std::size_t masked_cells = 0;   // occupied cells left undefined
  std::size_t clamped_cells = 0;
};

struct AbundantOptions {
  MissingProfilePolicy policy = MissingProfilePolicy::Mask;
  /// Classes of unprofiled vehicles, used by ClassAverage.
  std::map<std::string, VehicleClass> vehicle_classes;
};

/// Mean free-flow speed of the members plus the exp(-omega_l)-weighted mean
/// of (in-cell speed - desired speed at gap 1/rho - length).
OmegaField reconstruct_omega_abundant(const CellStatsResult& stats, const CellField& field,
                                      const ProfileMap& profiles, const AbundantOptions& opts = {});

/// omega = v / V(rho), with V clamped below at `eps_v`.
OmegaField reconstruct_omega_scarce(const CellField& field, const std::function<double(double)>& v_of_rho,
                                    double eps_v = 0.1);

/// Copies omega into the field; cells without omega hold NaN.
CellField attach_omega(const CellField& field, const OmegaField& omega);

/// Cell CSV extended with omega, omega_provenance, flags.
std::string omega_csv(const CellField& field, const OmegaField& omega);

}  // namespace hetflow
