__version__ = '0.3.1'
__copyright__ = 'Copyright (c) 2024, nma-influence contributors'
__licence__ = 'MIT'
__URL__ = 'https://github.com/nma-influence/nma-influence'
