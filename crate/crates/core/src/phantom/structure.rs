use serde::{Deserialize, Serialize};
use std::fmt;

/// Anatomical structure carried by a voxel.
///
/// The discriminant is the on-disk label code and the ordinal used wherever a
/// structure has to be treated as a number (random-forest features, label
/// volumes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum StructureId {
    Unclassified = 0,
    Ptv70 = 1,
    Ptv63 = 2,
    Ptv56 = 3,
    Brainstem = 4,
    SpinalCord = 5,
    RightParotid = 6,
    LeftParotid = 7,
    Larynx = 8,
    Esophagus = 9,
    Mandible = 10,
    LimPostNeck = 11,
}

impl StructureId {
    pub const ALL: [StructureId; 12] = [
        StructureId::Unclassified,
        StructureId::Ptv70,
        StructureId::Ptv63,
        StructureId::Ptv56,
        StructureId::Brainstem,
        StructureId::SpinalCord,
        StructureId::RightParotid,
        StructureId::LeftParotid,
        StructureId::Larynx,
        StructureId::Esophagus,
        StructureId::Mandible,
        StructureId::LimPostNeck,
    ];

    /// Targets in descending prescription order.
    pub const TARGETS: [StructureId; 3] =
        [StructureId::Ptv70, StructureId::Ptv63, StructureId::Ptv56];

    pub const OARS: [StructureId; 8] = [
        StructureId::Brainstem,
        StructureId::SpinalCord,
        StructureId::RightParotid,
        StructureId::LeftParotid,
        StructureId::Larynx,
        StructureId::Esophagus,
        StructureId::Mandible,
        StructureId::LimPostNeck,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn is_target(self) -> bool {
        matches!(self, StructureId::Ptv70 | StructureId::Ptv63 | StructureId::Ptv56)
    }

    pub fn is_oar(self) -> bool {
        !self.is_target() && self != StructureId::Unclassified
    }

    /// Prescribed dose in Gy for targets.
    pub fn prescription(self) -> Option<f64> {
        match self {
            StructureId::Ptv70 => Some(70.0),
            StructureId::Ptv63 => Some(63.0),
            StructureId::Ptv56 => Some(56.0),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StructureId::Unclassified => "Unclassified",
            StructureId::Ptv70 => "PTV70",
            StructureId::Ptv63 => "PTV63",
            StructureId::Ptv56 => "PTV56",
            StructureId::Brainstem => "Brainstem",
            StructureId::SpinalCord => "SpinalCord",
            StructureId::RightParotid => "RightParotid",
            StructureId::LeftParotid => "LeftParotid",
            StructureId::Larynx => "Larynx",
            StructureId::Esophagus => "Esophagus",
            StructureId::Mandible => "Mandible",
            StructureId::LimPostNeck => "LimPostNeck",
        }
    }

    /// Contour colour (RGB in [0, 1]).
    ///
    /// Every classified entry has unequal channels so it can never be confused
    /// with the grayscale used for unclassified tissue. The `Unclassified`
    /// entry is never painted; it is listed to keep the table 12 entries long.
    pub fn color(self) -> [f32; 3] {
        PALETTE[self as usize]
    }
}

impl fmt::Display for StructureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Fixed contour palette, indexed by label code.
pub const PALETTE: [[f32; 3]; 12] = [
    [0.0, 0.0, 0.0],    // Unclassified (grayscale, unused)
    [1.0, 0.0, 0.0],    // PTV70
    [1.0, 0.5, 0.0],    // PTV63
    [1.0, 1.0, 0.0],    // PTV56
    [0.0, 0.0, 1.0],    // Brainstem
    [0.0, 1.0, 1.0],    // SpinalCord
    [0.0, 1.0, 0.0],    // RightParotid
    [0.5, 1.0, 0.0],    // LeftParotid
    [1.0, 0.0, 1.0],    // Larynx
    [0.5, 0.0, 1.0],    // Esophagus
    [0.0, 0.5, 0.25],   // Mandible
    [0.75, 0.25, 0.5],  // LimPostNeck
];
