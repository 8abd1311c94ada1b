/// Number of pixel classes in the binary task.
pub const NUM_CLASSES: usize = 2;

/// Pixel classes. The discriminant is both the label value stored in masks
/// and the index into per-class vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Class {
    Suspension = 0,
    Aggregate = 1,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] = [Class::Suspension, Class::Aggregate];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Suspension => "suspension",
            Class::Aggregate => "aggregate",
        }
    }
}
