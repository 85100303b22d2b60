# Sphinx configuration for the nmdetect docs.

import os
import sys
sys.path.insert(0, os.path.abspath('..'))

import nmdetect

project = 'nmdetect'
copyright = 'nmdetect contributors'
author = 'nmdetect contributors'

# The short X.Y version and the full version, including alpha/beta/rc tags
version = nmdetect.__version__
release = version

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.viewcode',
    'sphinx.ext.intersphinx',
]

master_doc = 'index'
exclude_patterns = ['_build']
pygments_style = 'sphinx'

intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
}

html_theme = 'sphinx_rtd_theme'
