//! Category palettes: the channel layout of a semantic map.
//!
//! Channel ids are fixed by convention: 0 is free space, 1 is occupied
//! (walls), and everything from 2 up is an object category. Every cell of a
//! map belongs to exactly one of these, which is what makes the one-hot
//! invariant hold without an extra "background" channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel id of free space.
pub const FREE_ID: u8 = 0;
/// Channel id of occupied cells (walls, obstacles).
pub const OCCUPIED_ID: u8 = 1;
/// First object-category channel id.
pub const FIRST_OBJECT_ID: u8 = 2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

/// Ordered list of categories; index equals id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryPalette {
    categories: Vec<Category>,
}

impl CategoryPalette {
    /// Build a palette from `(name, color)` pairs; ids are assigned 0..C-1
    /// in order. Names and colors must be unique and there must be at least
    /// the free and occupied channels.
    pub fn new(entries: &[(&str, [u8; 3])]) -> Result<Self> {
        let categories = entries
            .iter()
            .enumerate()
            .map(|(id, (name, color))| Category {
                id: id as u8,
                name: (*name).to_string(),
                color: *color,
            })
            .collect();
        Self::from_categories(categories)
    }

    pub fn from_categories(categories: Vec<Category>) -> Result<Self> {
        if categories.len() < 2 {
            return Err(Error::invalid(
                "palette needs at least free and occupied categories",
            ));
        }
        if categories.len() > 256 {
            return Err(Error::invalid("palette supports at most 256 categories"));
        }
        for (i, cat) in categories.iter().enumerate() {
            if cat.id as usize != i {
                return Err(Error::invalid(format!(
                    "palette ids must be contiguous from 0; slot {i} has id {}",
                    cat.id
                )));
            }
        }
        for i in 0..categories.len() {
            for j in (i + 1)..categories.len() {
                if categories[i].name == categories[j].name {
                    return Err(Error::invalid(format!(
                        "duplicate category name {:?}",
                        categories[i].name
                    )));
                }
                if categories[i].color == categories[j].color {
                    return Err(Error::invalid(format!(
                        "duplicate category color {:?}",
                        categories[i].color
                    )));
                }
            }
        }
        Ok(CategoryPalette { categories })
    }

    /// The default six-category indoor palette.
    pub fn default_indoor() -> Self {
        CategoryPalette::new(&[
            ("free", [255, 255, 255]),
            ("occupied", [40, 40, 40]),
            ("bed", [31, 119, 180]),
            ("chair", [255, 127, 14]),
            ("table", [44, 160, 44]),
            ("sofa", [214, 39, 40]),
        ])
        .expect("default palette is valid")
    }

    /// Number of categories C.
    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        false // at least 2 categories by construction
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn get(&self, id: u8) -> Option<&Category> {
        self.categories.get(id as usize)
    }

    pub fn by_name(&self, name: &str) -> Option<&Category> {
        self.categories.iter().find(|c| c.name == name)
    }

    /// Object-category ids (>= 2).
    pub fn object_ids(&self) -> impl Iterator<Item = u8> + '_ {
        FIRST_OBJECT_ID..self.categories.len() as u8
    }

    /// Number of object categories n = C - 2.
    pub fn object_count(&self) -> usize {
        self.categories.len().saturating_sub(FIRST_OBJECT_ID as usize)
    }
}

/// Row of the target-embedding table for an object category id (>= 2).
pub fn object_row(category_id: u8) -> Option<usize> {
    if category_id >= FIRST_OBJECT_ID {
        Some((category_id - FIRST_OBJECT_ID) as usize)
    } else {
        None
    }
}
